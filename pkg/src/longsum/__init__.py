"""Long-document summarization with sliding-window + global-token attention."""

from .attention import dense_attention_reference, sparse_attention_forward, sparse_attention_weights
from .decoding import DecodeConfig, beam_decode, greedy_decode
from .evaluation import EvalReport, RougeScore, evaluate_corpus, measure_fps, rouge_l, rouge_n
from .kernels import BACKEND as KERNEL_BACKEND
from .model import Model, ModelConfig, count_params, load_checkpoint, save_checkpoint
from .pattern import AttentionPattern, build_pattern
from .tensor import Tensor, backward, finite_difference_grad, matmul, no_grad, softmax_rows
from .text import CorpusPair, Vocabulary, build_vocab, detokenize, load_corpus, make_batches, tokenize
from .training import TrainConfig, clip_gradient, cross_entropy_from_logits, cross_entropy_loss, train, train_step

__version__ = "0.1.0"
