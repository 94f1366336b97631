import numpy as np
import pytest

from peftlab import evaluate as ev
from peftlab import tensor as T
from peftlab.data import EOS_ID, SEP_ID, VOCAB_SIZE, RawRecord, detokenize, parse_label, sentiment3, tokenize
from peftlab.evaluate import (
    EvalReport,
    epoch_means_from_curve,
    evaluate,
    export_loss_curve,
    generate_label,
    read_loss_curve,
)
from peftlab.model import ModelConfig, build_model, tiny_config
from peftlab.synthetic import keyword_label, make_records
from peftlab.trainer import TrainReport

TASK = sentiment3()


def bigram_model(word: str):
    """A layer-free model whose next token depends only on the current one.

    With one-hot embeddings the final norm yields sqrt(d) * e_i, so the head
    row for token i alone decides the successor.
    """
    cfg = ModelConfig(n_layers=0, d_model=VOCAB_SIZE, n_heads=1, n_kv_heads=1, head_dim=VOCAB_SIZE,
                      d_ff=1, vocab_size=VOCAB_SIZE, max_context=512)
    model = build_model(cfg, seed=0)
    model.params["embed"] = T.tensor(np.eye(VOCAB_SIZE))
    head = np.zeros((VOCAB_SIZE, VOCAB_SIZE))
    chain = [SEP_ID] + tokenize(word) + [EOS_ID]
    assert len(set(chain[:-1])) == len(chain) - 1, "successor table needs distinct bytes"
    for a, b in zip(chain, chain[1:]):
        head[a, b] = 1.0
    model.params["head"] = T.tensor(head)
    return model


class ScriptedForward:
    """Stands in for the decoder: reads the prompt and spells ``answer(text)``."""

    def __init__(self, answer):
        self.answer = answer

    def __call__(self, model, ids, mode="eval", **_):
        sep = ids.index(SEP_ID)
        prompt = detokenize(ids[:sep])
        target = tokenize(self.answer(prompt)) + [EOS_ID]
        done = len(ids) - sep - 1
        logits = np.zeros((len(ids), VOCAB_SIZE))
        logits[-1, target[min(done, len(target) - 1)]] = 1.0
        return T.tensor(logits)


def _tiny():
    return build_model(tiny_config(vocab_size=VOCAB_SIZE), seed=0)


def test_rigged_model_emits_label():
    model = bigram_model("Neutral")
    assert generate_label(model, TASK, "Shares fell 3%") == "Neutral"
    assert generate_label(model, TASK, "anything at all") == "Neutral"


def test_generation_is_repeatable():
    model = _tiny()
    outs = {generate_label(model, TASK, "Acme posts gains.", max_new_tokens=6) for _ in range(3)}
    assert len(outs) == 1


def test_zero_new_tokens_gives_no_match():
    out = generate_label(bigram_model("Neutral"), TASK, "x", max_new_tokens=0)
    assert out == "" and parse_label(out, TASK) is None


def test_oracle_model_scores_perfectly(monkeypatch):
    monkeypatch.setattr(ev, "forward", ScriptedForward(keyword_label))
    recs = make_records(30, 1, TASK)
    report = evaluate(_tiny(), recs, TASK)
    assert report.accuracy == 1.0 and report.no_match == 0
    counts = report.confusion[:, :3]
    assert np.array_equal(counts, np.diag(np.diag(counts)))
    assert report.macro_f1 == 1.0


def test_gibberish_model_scores_zero(monkeypatch):
    monkeypatch.setattr(ev, "forward", ScriptedForward(lambda _: "qzx#"))
    recs = make_records(9, 2, TASK)
    report = evaluate(_tiny(), recs, TASK)
    assert report.accuracy == 0.0 and report.no_match == report.total == 9


def test_two_of_three(monkeypatch):
    monkeypatch.setattr(ev, "forward", ScriptedForward(keyword_label))
    recs = [RawRecord("Acme posts gains.", "Positive"), RawRecord("Hooli sees losses.", "Negative"),
            RawRecord("Stark reports flat.", "Positive")]
    report = evaluate(_tiny(), recs, TASK)
    assert report.correct == 2 and report.accuracy == pytest.approx(0.6667, abs=1e-4)
    assert report.confusion.sum() == 3
    assert report.confusion[TASK.index("Positive"), TASK.index("Neutral")] == 1


def test_constrained_decoding_picks_rigged_label():
    model = bigram_model("Neutral")
    assert ev.constrained_label(model, TASK, "whatever") == "Neutral"
    report = evaluate(model, make_records(6, 3, TASK), TASK, constrained=True)
    assert report.no_match == 0


def test_report_text_and_dict():
    conf = np.array([[2, 0, 0, 1], [0, 1, 0, 0], [1, 0, 0, 0]])
    r = EvalReport(TASK.labels, conf, 5)
    assert r.accuracy == 3 / 5 and r.no_match == 1
    assert r.precision["Neutral"] == pytest.approx(2 / 3) and r.recall["Neutral"] == pytest.approx(2 / 3)
    d = r.to_dict()
    assert d["confusion"] == conf.tolist() and d["correct"] == 3
    assert r.to_text().splitlines()[0] == "accuracy  0.6000  (3/5)"


def _report(n, per_epoch):
    return TrainReport([1.0 / (i + 1) for i in range(n)], [], [], 0, per_epoch)


def test_loss_curve_rows_and_roundtrip(tmp_path):
    rep = _report(5, 5)
    rep.epoch_means = [0.5]
    path = tmp_path / "loss.csv"
    export_loss_curve(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# epoch boundaries: 5" and lines[1] == "step,loss" and len(lines) == 7
    assert lines[2].startswith("1,")
    losses, bounds = read_loss_curve(path)
    assert losses == rep.step_losses and bounds == [5]


def test_epoch_boundaries_follow_steps_per_epoch(tmp_path):
    rep = _report(6, 2)
    rep.epoch_means = [0, 0, 0]
    export_loss_curve(rep, tmp_path / "l.csv")
    losses, bounds = read_loss_curve(tmp_path / "l.csv")
    assert bounds == [2, 4, 6]
    assert epoch_means_from_curve(losses, bounds) == pytest.approx([0.75, (1 / 3 + 1 / 4) / 2, (1 / 5 + 1 / 6) / 2])


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ValueError):
        export_loss_curve(_report(0, 1), tmp_path / "x.csv")
