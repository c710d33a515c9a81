"""Constants"""

from typing import Final

EDICT_P: Final = 0.93
INFERENCE_STEPS: Final = 50
T_TRAIN: Final = 1000
BETA_START: Final = 1e-4
BETA_END: Final = 0.02

CONDITIONING_DROPOUT: Final = 0.1
CAPTION_WORD_DROPOUT: Final = 0.3

SMILE_ESCALATION: Final = ((25, 3.0), (30, 4.0), (35, 4.0), (35, 6.0))
AGE_ESCALATION: Final = ((30, 4.0), (30, 6.0), (35, 4.0), (35, 6.0))

NULL_TOKEN: Final = "<null>"
END_TOKEN: Final = "<end>"
TEMPLATE_WORDS: Final = ("A", "picture", "image", "with", "a")

# One caption word per (attribute, value).
ATTRIBUTE_WORDS: Final = (
    ("frown", "smile"),
    ("pale", "blush"),
    ("dark", "light"),
    ("borderless", "framed"),
    ("bareheaded", "hat"),
    ("plain", "ornament"),
)

FVA_THRESHOLD: Final = 0.5
CLASSIFIER_ACCURACY_THRESHOLD: Final = 0.95
ORACLE_ACCURACY_THRESHOLD: Final = 0.99

# Classifier bridge framing.
FRAME_PREFIX: Final = b"\x55\xaa"
FRAME_LENGTH_SIZE: Final = 4
PREDICT_REQUEST: Final = 0xB0
PREDICT_REPLY: Final = 0xB1
ERROR_REPLY: Final = 0xBE
