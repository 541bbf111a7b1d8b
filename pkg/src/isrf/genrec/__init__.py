from .beam import TokenTrie, beam_search, greedy_decode, model_step_fn
from .model import (SourceBatch, generation_loss, init_backbone, inject_batch, inject_inputs,
                    seq_model_backward, seq_model_forward, target_batch)
from .tokenizer import (DR_TEMPLATE, SR_TEMPLATE, TokenizedInput, Tokenizer, dr_slot_fn,
                        render_dr_prompt, render_sr_prompt, sr_slot_fn)

__all__ = [
    "TokenTrie", "beam_search", "greedy_decode", "model_step_fn", "SourceBatch", "generation_loss",
    "init_backbone", "inject_batch", "inject_inputs", "seq_model_backward", "seq_model_forward",
    "target_batch", "DR_TEMPLATE", "SR_TEMPLATE", "TokenizedInput", "Tokenizer", "dr_slot_fn",
    "render_dr_prompt", "render_sr_prompt", "sr_slot_fn",
]
