import os
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[2]))
os.environ.setdefault("DJANGO_SETTINGS_MODULE", "siamdiff.settings")
import django; django.setup()
from django.core.management import call_command

tiny = {
    "T": 10, "IMAGE_SIZE": 16, "BASE_WIDTH": 4, "TIME_EMBED_DIM": 8, "STAGE_CHANNELS": "4,8,16",
    "BLOCKS_PER_STAGE": 1, "N_ITER": 4, "BATCH_SIZE": 2, "T_TAU": 5, "TEXTURE_FREQ": 3.0,
    "RADIUS_MIN": 3.0, "RADIUS_MAX": 5.0, "SEG_WIDTH": 4, "SEG_ITERATIONS": 3,
}

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    cfg = root / "tiny.env"
    cfg.write_text("".join(f"{k}={v}\n" for k, v in tiny.items()), encoding="utf-8")
    call_command("gen_data", out=str(root / "data"), config=str(cfg), n=4, seed=0)
    call_command("gen_data", out=str(root / "test"), config=str(cfg), n=2, seed=1)
    call_command("train", out=str(root / "train"), data=str(root / "data"), config=str(cfg))
    call_command("sample", out=str(root / "samples"), ckpt=str(root / "train" / "model.ckpt"),
                 masks=str(root / "data"), steps=3, seeds="0,1")
    call_command("eval", out=str(root / "eval"), real=str(root / "data"), synth=str(root / "samples"))
    call_command("seg_bench", out=str(root / "bench"), real=str(root / "data"), synth=str(root / "samples"),
                 test=str(root / "test"), config=str(cfg), seeds="0")
    print("SMOKE: OK")
