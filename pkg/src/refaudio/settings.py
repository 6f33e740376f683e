# Application-wide defaults.
# Run configs (see config/*.ini) override these per experiment; the values
# below are the desk-scale defaults used when a key is absent.

# Audio
SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
MAX_EVENT_SECONDS = 5.0
PEAK_LEVEL = 0.9

# Spectrogram / codec
N_FFT = 1024
HOP_LENGTH = 160
N_MELS = 64
MEL_FRAMES = 1024  # 1000 hop frames zero-padded to a power of two
COMPRESSION = 4
LATENT_TIME = MEL_FRAMES // COMPRESSION
LATENT_FREQ = N_MELS // COMPRESSION
DETERMINISTIC_CHANNELS = COMPRESSION * COMPRESSION
VAE_CHANNELS = 8

# Text
TOKEN_LENGTH = 50
VOCAB_SIZE = 4096
PAD_ID = 0
NULL_ID = 1
D_TEXT = 256
D_TEXT_PAPER = 1024

# Generator
K_MAX = 3
SIGMA = 1e-5
N_HIDDEN = 32
N_HIDDEN_PAPER = 96
N_HIDDEN_PAPER_LARGE = 128
ALIGN_GRID = (96, 6)
CFG_WEIGHT = 2.0
SAMPLE_STEPS = 25
MAX_SAMPLE_STEPS = 50

# Training
LEARNING_RATE = 1e-4
LEARNING_RATE_PAPER = 5e-5
WARMUP_STEPS = 10_000
MASK_P = 0.10
DROP_P = 0.40
CFG_DROPOUT = 0.10

# Dataset forge
SNR_RANGE_DB = (-15.0, 15.0)
CONNECTION_PHRASES = ("followed by", "and then", "after that", "before", "then")
PAPER_SCALE_COUNTS = {
    "concatenation": (92_299, 200),
    "overlay": (146_481, 200),
    "general": (49_502, 928),
}

# Environment overrides (paths only)
ENV_PREFIX = "REFAUDIO_"
