from .audio_io import AudioClip, Manifest, ManifestEntry, load_manifest, read_wav, save_manifest, write_wav
from .classify import SpeakerModel, predict
from .config import load_train_config
from .errors import *
from .metrics import confusion_matrix, precision_recall_f1
from .trainer import TrainConfig, evaluate, finetune, load_model, pretrain

__version__ = '0.1.0'
