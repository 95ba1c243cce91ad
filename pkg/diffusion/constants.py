EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

# RNG stream ids, mixed into SeedSequence([seed, stream, ...]).
STREAM_DATA = 11
STREAM_MASKS = 13
STREAM_INIT = 17
STREAM_TRAIN = 19
STREAM_SAMPLE = 23
STREAM_SEGMENTER = 29
STREAM_EVAL = 31
STREAM_GRADCHECK = 37

# Timestep index meaning "clean data" (alpha_bar = 1) for the last DDIM transition.
CLEAN = -1

MIN_MASK_AREA = 16
MAX_TRANSFORM_ATTEMPTS = 100

LOSS_LOG_HEADER = ["k", "t", "loss_m", "loss_i", "loss_c", "loss_m_prime", "total", "w_i", "w_a"]

BRANCH_SHARED = "shared"
BRANCH_DETACHED = "detached"
BRANCH_MODES = (BRANCH_SHARED, BRANCH_DETACHED)

HINT_DENSE = "dense"
HINT_SPARSE = "sparse"

INJECT_STAGE = "stage"
INJECT_SKIP = "skip"

MODE_SIAMESE = "siamese"
MODE_CONTROLNET = "controlnet"
MODE_DETACHED = "detached"
TRAIN_MODES = (MODE_SIAMESE, MODE_CONTROLNET, MODE_DETACHED)

PROFILE_DESK = "desk"
PROFILE_PAPER = "paper-faithful"

W_C_SWEEP = (0.0, 0.5, 1.0, 1.5, 2.0)

RUN_MANIFEST_NAME = "run_manifest.json"
CHECKPOINT_NAME = "model.ckpt"
LOSS_LOG_NAME = "loss_log.csv"
