from semver import Version


# Bumping the major version makes older checkpoints unreadable.
CHECKPOINT_FORMAT_VERSION = Version.parse("1.0.0")
CHECKPOINT_MAGIC = b"SSLCKPT"

SAMPLE_RATE = 16000

# Baseline feature encoder geometry (25 ms receptive field, 20 ms hop at 16 kHz).
BASE_ENCODER_CHANNELS = 512
BASE_ENCODER_KERNELS = (10, 3, 3, 3, 3, 2, 2)
BASE_ENCODER_STRIDES = (5, 2, 2, 2, 2, 2, 2)
# Channel width used when the final k layers are replaced, keyed by k.
TAIL_WIDENING = {0: 512, 2: 640, 4: 608}

TOY_ENCODER_CHANNELS = 32
TOY_ENCODER_KERNELS = (10, 8, 4)
TOY_ENCODER_STRIDES = (5, 4, 2)

KAISER_BETA = 8.6
RESAMPLE_ZERO_CROSSINGS = 16
RESAMPLE_CUTOFF = 0.95

MAX_PITCH_SHIFT_CENTS = 1200.0
WSOLA_WINDOW_SECONDS = 0.025
WSOLA_TOLERANCE_SECONDS = 0.005

MAX_ROOM_SCALE = 100.0
MAX_RT60_SECONDS = 0.8

# Below this RMS a signal is treated as silence.
SILENCE_RMS = 1e-8
NOISE_OFFSET_RETRIES = 8

# Abort training when more than half of the steps in this window were skipped.
SKIP_WINDOW_STEPS = 100

DIR_PRESETS = "presets"
METRICS_FILENAME = "metrics.jsonl"
