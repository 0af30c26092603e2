import numpy as np
import pytest

from data_access_layer.entity_linker import Gazetteer
from data_access_layer.graph_builder import build_graphs, build_vocabulary
from data_object_model.corpus import Document
from data_object_model.run_state import EncoderConfig
from model_access_layer.graph_encoder import EncoderParams


def make_doc(doc_id, tokens, patient_id="p0", seq_index=0, labels=("A",)):
    if isinstance(tokens, str):
        tokens = tokens.split()
    return Document(doc_id=doc_id, patient_id=patient_id, seq_index=seq_index, tokens=list(tokens),
                    labels=list(labels))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(embedding_dim=5, hidden_dim=4, output_dim=5, init_scale=0.5)


@pytest.fixture
def toy_corpus():
    return [
        make_doc("d0", "fever cough rash fever", "p0", 0),
        make_doc("d1", "cough rash pain", "p0", 1),
        make_doc("d2", "pain fever nausea cough", "p0", 2),
        make_doc("d3", "rash nausea pain fever", "p1", 0),
        make_doc("d4", "nausea cough fever rash", "p1", 1),
        make_doc("d5", "pain rash cough nausea", "p2", 0),
        make_doc("d6", "fever pain rash", "p2", 1),
    ]


@pytest.fixture
def toy_gazetteer():
    return Gazetteer({"fever": "Pyrexia", "cough": "Cough"})


@pytest.fixture
def toy_vocab(toy_corpus, toy_gazetteer):
    return build_vocabulary(toy_corpus, min_count=1, max_words_per_doc=16, gazetteer=toy_gazetteer)


@pytest.fixture
def toy_graphs(toy_corpus, toy_vocab, toy_gazetteer):
    return build_graphs(toy_corpus, toy_vocab, toy_gazetteer, window_size=2, max_words_per_doc=16)


@pytest.fixture
def toy_encoder(toy_vocab, tiny_encoder_cfg):
    """Random weights; the output bias is pushed up so every central embedding stays non-zero."""
    params = EncoderParams.initialize(toy_vocab.feature_size, tiny_encoder_cfg, np.random.default_rng(1))
    params.b1.values += 1.0
    return params
