from __future__ import annotations

import pytest


@pytest.fixture(scope="session")
def toy_model_dir(tmp_path_factory) -> str:
    """A tiny randomly-initialized 2-layer causal LM saved to disk.

    Word-level tokenizer over a closed vocabulary; no EOS token so
    greedy generation always runs to max_new_tokens. Weights are seeded
    for reproducibility; none of the exporter's guarantees depend on
    them being trained.
    """
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    words = (
        "<unk> the a cat dog sat ran on mat rug fast slow big small red blue "
        "is was and or not very quite jumps sleeps eats barks purrs . ! ?"
    ).split()
    vocab = {w: i for i, w in enumerate(words)}
    tok = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    tokenizer = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>")

    torch.manual_seed(1234)
    config = GPT2Config(
        vocab_size=len(vocab),
        n_positions=128,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=0,
        eos_token_id=0,
    )
    model = GPT2LMHeadModel(config)
    assert sum(p.numel() for p in model.parameters()) < 10_000_000

    target = tmp_path_factory.mktemp("toy_model")
    model.save_pretrained(target)
    tokenizer.save_pretrained(target)
    return str(target)
