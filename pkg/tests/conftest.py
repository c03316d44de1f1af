import numpy as np
import pytest

from e4srec.backbone import BackboneConfig, BackboneWeights, Vocabulary, instruction_corpus
from e4srec.model import E4SRecModel, TrainConfig
from e4srec.seqrec import ItemEmbeddingTable


def make_backbone(dim=32, layers=2, heads=4, seed=0):
    vocab = Vocabulary.build(instruction_corpus(50))
    cfg = BackboneConfig(vocab_size=len(vocab), dim=dim, n_layers=layers, n_heads=heads, ffn_dim=48, context=96)
    w = BackboneWeights.initialize(cfg, vocab, seed=seed)
    w.freeze()
    return w


def make_table(n_items=20, d_s=8, seed=0, provenance="sasrec"):
    rng = np.random.default_rng(seed)
    return ItemEmbeddingTable(rng.normal(0, 0.5, size=(n_items, d_s)).astype(np.float32), provenance)


def make_model(backbone=None, table=None, no_llm=False, seed=0, **cfg):
    backbone = backbone if backbone is not None else make_backbone()
    table = table if table is not None else make_table()
    config = TrainConfig(seed=seed, lora_rank=4, lora_alpha=8, **cfg)
    return E4SRecModel.create(None if no_llm else backbone, table, config, no_llm=no_llm, d_k=backbone.config.dim)


def randomize_adapter(model, seed=1, scale=0.05):
    rng = np.random.default_rng(seed)
    for b in model.adapter.B.values():
        b.data[:] = rng.normal(0, scale, size=b.shape)


@pytest.fixture(scope="module")
def backbone():
    return make_backbone()
