import math
import os
from pathlib import Path

import numpy as np
import pytest

import turnlm

SOURCE = Path(os.environ.get("TURNLM_SOURCE_DIR", Path(__file__).resolve().parents[2]))

TURNS = [("user", "Hi there!"), ("bot", "Hello, friend."), ("user", "How are you?"), ("bot", "Fine.")]


@pytest.fixture
def vocab():
    return turnlm.Vocabulary.build([TURNS])


def test_tokenize_splits_punctuation():
    assert turnlm.tokenize("Hi there!") == ["hi", "there", "!"]


def test_vocabulary_round_trip(vocab, tmp_path):
    assert vocab.tokens[:3] == ["<pad>", "<unk>", "<eos>"]
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = turnlm.Vocabulary.load(path)
    assert loaded.tokens == vocab.tokens
    assert vocab.decode(vocab.encode("how are you ?")) == "how are you ?"


def test_assemble_types_follow_speakers(vocab):
    seq = turnlm.assemble(TURNS, vocab)
    assert len(seq["ids"]) == len(seq["types"]) == len(seq["positions"])
    assert seq["positions"] == list(range(len(seq["ids"])))
    eos = [i for i, t in enumerate(seq["ids"]) if t == 2]
    assert len(eos) == 4
    assert set(seq["types"][: eos[0] + 1]) == {0}
    assert set(seq["types"][eos[0] + 1 : eos[1] + 1]) == {1}


def test_one_instance_per_bot_turn(vocab):
    insts = turnlm.training_instances(TURNS, vocab)
    assert len(insts) == 2
    for inst in insts:
        start, end = inst["target"]
        assert sum(inst["loss_mask"]) == end - start


def test_loss_and_schedule_anchors():
    logits = np.zeros((1, 7))
    assert turnlm.masked_cross_entropy(logits, [3], [1]) == pytest.approx(math.log(7), abs=1e-12)
    hand = np.array([[0.0, math.log(3.0)]])
    assert turnlm.masked_cross_entropy(hand, [1], [1]) == pytest.approx(math.log(4 / 3), abs=1e-12)
    assert turnlm.lr_at(0, 2e-5, 0.1, 1000) == 0.0
    assert turnlm.lr_at(100, 2e-5, 0.1, 1000) == pytest.approx(2e-5, abs=1e-12)
    assert turnlm.lr_at(550, 2e-5, 0.1, 1000) == pytest.approx(1e-5, abs=1e-12)


def test_metrics():
    assert turnlm.distinct_n(["a a a a"], 1) == 0.25
    report = turnlm.evaluate_metrics([("the cat sat", "the cat sat")])
    assert report["bleu1"] == pytest.approx(1.0)
    assert report["rougeL"] == pytest.approx(1.0)
    assert report["pairs"] == 1


def test_forward_shape_and_causality(vocab):
    model = turnlm.init_model(len(vocab), seed=1, config="embed_dim = 16\nnum_heads = 2\nffn_dim = 32\nmax_positions = 32")
    seq = turnlm.assemble(TURNS, vocab)
    logits = model.forward(seq["ids"], seq["types"], seq["positions"])
    assert logits.shape == (len(seq["ids"]), len(vocab))
    prefix = model.forward(seq["ids"][:5], seq["types"][:5], seq["positions"][:5])
    np.testing.assert_allclose(prefix, logits[:5], atol=1e-12)


def test_train_and_chat(vocab, tmp_path):
    config = "embed_dim = 16\nnum_layers = 1\nnum_heads = 2\nffn_dim = 32\nmax_positions = 32\ndropout = 0.0"
    model = turnlm.init_model(len(vocab), seed=2, config=config)
    report = turnlm.train(model, [TURNS], vocab, "epochs = 150\nbatch_size = 2\nbase_lr = 1e-2\nweight_decay = 0")
    assert report["steps"] == 150
    assert report["epoch_losses"][-1] < report["epoch_losses"][0]

    path = tmp_path / "model.ckpt"
    model.save(path)
    reloaded = turnlm.Model.load(path)
    session = turnlm.ChatSession(reloaded, vocab, max_new_tokens=8)
    assert session.reply("Hi there!") == "hello , friend ."
    assert session.exchanges == 1
    assert set(session.context()["types"]) == {0, 1}
    with pytest.raises(turnlm.ContractError):
        session.reply("   ")


def test_sample_corpus_loads():
    convs = turnlm.load_conversations(SOURCE / "data" / "sample_corpus.jsonl")
    assert len(convs) == 20
    assert all(turns[0][0] == "user" for _, turns in convs)
