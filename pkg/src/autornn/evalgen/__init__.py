"""Caption metrics, decoding and self-critical fine-tuning."""
from .decoding import beam_decode, beam_search, decode_all, greedy_decode, sample_decode
from .metrics import CiderScorer, MetricReport, bleu, cider, evaluate, rouge_l
from .scst import scst_finetune, scst_step

__all__ = [
    "CiderScorer", "MetricReport", "beam_decode", "beam_search", "bleu", "cider", "decode_all",
    "evaluate", "greedy_decode", "rouge_l", "sample_decode", "scst_finetune", "scst_step",
]
