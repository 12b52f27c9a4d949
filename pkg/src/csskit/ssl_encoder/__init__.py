from .augment import mask_spans, utterance_mix
from .features import base_features, mel_filterbank
from .kmeans import KMeansTokenizer, LabelCache, fit_kmeans, kmeans_tokenize
from .model import (EmbeddingStack, EncoderConfig, LayerWeights, SSLEncoder,
                    align_frame_rate, encode_layers, encoder_param_count, fuse_embedding)
from .pretrain import (MSPTrainer, PretrainConfig, PretrainResult, TrainingDivergedError,
                       make_batch, msp_loss, msp_pretrain)
