import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from auxmoblcast.errors import ConfigError, EmptyCorpusError, LengthMismatchError
from auxmoblcast.mobility_data import windows_for
from auxmoblcast.model import ModelConfig, init_params
from auxmoblcast.prompting import PromptVariant, render_corpus
from auxmoblcast.tokenizer import EOS_ID, PAD_ID, build_vocab
from auxmoblcast.training import (
    METRIC_COLUMNS,
    PlateauScheduler,
    TrainingConfig,
    batch_losses,
    combined_loss,
    poi_ce_loss,
    save_run,
    sequence_ce_loss,
    train,
)

VARIANT = PromptVariant("C")


# -- losses ---------------------------------------------------------------------------

def test_ce_perfect_prediction_is_zero():
    target = torch.tensor([[5, 6, EOS_ID]])
    logits = torch.full((1, 3, 10), -1e9)
    for j, t in enumerate(target[0]):
        logits[0, j, t] = 0.0
    assert float(sequence_ce_loss(logits, target)) == 0.0


def test_ce_uniform_is_log_vocab():
    logits = torch.zeros((2, 4, 37))
    target = torch.tensor([[5, 6, 7, EOS_ID], [8, EOS_ID, PAD_ID, PAD_ID]])
    assert float(sequence_ce_loss(logits, target)) == pytest.approx(math.log(37), abs=1e-6)


def logsumexp_oracle(logits, targets):
    total, count = 0.0, 0
    for row, t in zip(logits, targets):
        if t == PAD_ID:
            continue
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[t]
        count += 1
    return total / count


def test_ce_matches_independent_oracle():
    rng = np.random.default_rng(7)
    logits = rng.normal(scale=3.0, size=(3, 11))
    targets = [4, 9, 2]
    got = float(sequence_ce_loss(torch.tensor(logits[None]), torch.tensor([targets])))
    assert got == pytest.approx(logsumexp_oracle(logits.tolist(), targets), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_ce_ignores_padding(seed, pad):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(1, 8, 9))
    targets = rng.integers(1, 9, size=8)
    targets[8 - min(pad, 7):] = PAD_ID
    got = float(sequence_ce_loss(torch.tensor(logits), torch.tensor(targets[None])))
    assert got == pytest.approx(logsumexp_oracle(logits[0].tolist(), targets.tolist()), abs=1e-9)


def test_ce_length_mismatch():
    with pytest.raises(LengthMismatchError):
        sequence_ce_loss(torch.zeros((1, 3, 5)), torch.tensor([[1, 2]]))


def test_poi_loss_examples():
    assert poi_ce_loss([0.0, 1.0, 0.0], 1) == 0.0
    assert poi_ce_loss([0.2] * 5, 3) == pytest.approx(math.log(5))
    assert poi_ce_loss([0.2] * 5, 3) == pytest.approx(1.6094, abs=1e-4)
    assert poi_ce_loss([0.7, 0.2, 0.1], 1) == pytest.approx(-math.log(0.2))
    with pytest.raises(IndexError):
        poi_ce_loss([0.5, 0.5], 2)


def test_combined_loss_examples():
    assert combined_loss(2.3, 0.7, TrainingConfig(lambda_ce=1.0, lambda_poi=0.0)) == pytest.approx(2.3)
    assert combined_loss(2.0, 1.0, TrainingConfig(lambda_ce=0.8, lambda_poi=0.2)) == pytest.approx(1.8)
    assert combined_loss(2.0, 1.0, TrainingConfig(lambda_ce=0.9, lambda_poi=0.1)) == pytest.approx(1.9)


def test_lambda_sum_enforced():
    with pytest.raises(ConfigError) as err:
        TrainingConfig(lambda_ce=0.8, lambda_poi=0.3)
    assert err.value.key == "lambda_poi"
    with pytest.raises(ConfigError):
        TrainingConfig(lambda_ce=1.2, lambda_poi=-0.2)
    TrainingConfig(lambda_ce=0.7, lambda_poi=0.3)  # 0.7 + 0.3 rounds within 1e-9


# -- scheduler ------------------------------------------------------------------------

def lr_trace(metrics, **kw):
    sched = PlateauScheduler(1.0, **kw)
    lrs = []
    for m in metrics:
        lrs.append(sched.lr)
        sched.step(m)
    return lrs, sched


def cut_epochs(lrs):
    # epoch e trains with lrs[e-1]; a cut decided after epoch e shows up at e+1
    return [e for e in range(1, len(lrs)) if lrs[e] < lrs[e - 1]]


def test_plateau_trace_constant_losses():
    lrs, _ = lr_trace([5.0] * 20, patience=6, cooldown=2, factor=0.1)
    cuts = cut_epochs(lrs)
    assert cuts[0] == 7
    assert cuts[1] >= 10
    assert cuts[:2] == [7, 15]


def test_plateau_improvement_resets():
    lrs, _ = lr_trace([5, 4, 3, 2, 1, 0.5, 0.25, 0.1] * 2, patience=3, cooldown=0)
    assert cut_epochs(lrs) == [11, 14]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=60), st.integers(0, 8), st.integers(0, 4))
def test_lr_non_increasing(metrics, patience, cooldown):
    lrs, _ = lr_trace(metrics, patience=patience, cooldown=cooldown)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# -- training loop --------------------------------------------------------------------

TINY = dict(d_model=16, num_heads=2, encoder_layers=1, decoder_layers=1, max_len=64, dropout=0.0)


def corpus(small_city, variant=VARIANT):
    split_pairs = render_corpus(small_city, variant)
    vocab = build_vocab([p.input_text for p in split_pairs] + [p.target_text for p in split_pairs])
    return split_pairs, vocab


@pytest.fixture(scope="module")
def small_city():
    from auxmoblcast.mobility_data import CategoryProfile, SyntheticSpec, generate_synthetic
    import datetime as dt

    spec = SyntheticSpec(
        num_pois=4,
        categories=(CategoryProfile("Hotel", 8, (0.8, 0.8, 0.8, 0.9, 1.1, 1.6, 1.5)),
                    CategoryProfile("Museum", 3, (0.3, 1.0, 1.0, 1.0, 1.1, 1.6, 1.3))),
        start_date=dt.date(2021, 3, 1), num_days=30, noise=0.0, seed=4,
    )
    return windows_for(generate_synthetic(spec))


def test_single_pair_memorisation(small_city):
    pairs, vocab = corpus(small_city[:1])
    model = init_params(ModelConfig(vocab.size, 2, **TINY), 0)
    cfg = TrainingConfig(learning_rate=3e-3, epochs=200, early_stop_patience=1000, batch_size=1,
                         plateau_patience=1000, weight_decay=0.0)
    _, report = train(model, vocab, pairs, pairs, cfg, VARIANT, ["Hotel", "Museum"])
    assert len(report.epochs) == 200
    assert report.epochs[-1].total < 0.01 * report.epochs[0].total


def test_training_deterministic_and_consistent(small_city):
    pairs, vocab = corpus(small_city)
    cfg = TrainingConfig(learning_rate=1e-3, epochs=3, batch_size=8, seed=5)

    def run():
        model = init_params(ModelConfig(vocab.size, 2, **TINY), 1)
        return train(model, vocab, pairs[:40], pairs[40:60], cfg, VARIANT, ["Hotel", "Museum"])

    (m1, r1), (m2, r2) = run(), run()
    assert r1.epochs == r2.epochs and r1.batch_totals == r2.batch_totals
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)
    for total, ce, poi in r1.batch_totals:
        assert total == pytest.approx(0.8 * ce + 0.2 * poi, abs=1e-6)
    assert r1.best.val_total == min(e.val_total for e in r1.epochs)
    lrs = [e.lr for e in r1.epochs]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_returns_best_validation_weights(small_city):
    pairs, vocab = corpus(small_city)
    cfg = TrainingConfig(learning_rate=1e-3, epochs=4, batch_size=8)
    model = init_params(ModelConfig(vocab.size, 2, **TINY), 1)
    model, report = train(model, vocab, pairs[:40], pairs[40:60], cfg, VARIANT, ["Hotel", "Museum"])
    from auxmoblcast.training import _validate, encode_corpus

    val = _validate(model, vocab, encode_corpus(vocab, pairs[40:60], ["Hotel", "Museum"]),
                    pairs[40:60], VARIANT, cfg)
    assert val[0] == pytest.approx(report.best.val_total, abs=1e-6)


def test_early_stopping(small_city):
    pairs, vocab = corpus(small_city)
    cfg = TrainingConfig(learning_rate=1e-2, epochs=40, early_stop_patience=2, batch_size=64)
    model = init_params(ModelConfig(vocab.size, 2, **TINY), 1)
    _, report = train(model, vocab, pairs[:10], pairs[40:], cfg, VARIANT, ["Hotel", "Museum"])
    assert report.stopped_early
    assert len(report.epochs) == report.best_epoch + 2


def test_zero_lambda_poi_gives_zero_head_gradient(small_city):
    pairs, vocab = corpus(small_city)
    from auxmoblcast.training import encode_corpus

    data = encode_corpus(vocab, pairs[:6], ["Hotel", "Museum"])
    model = init_params(ModelConfig(vocab.size, 2, **TINY), 0)
    total, *_ = batch_losses(model, data.batch(range(6)), TrainingConfig(lambda_ce=1.0, lambda_poi=0.0))
    total.backward()
    assert torch.count_nonzero(model.category_head.weight.grad) == 0
    assert torch.count_nonzero(model.category_head.bias.grad) == 0
    model.zero_grad()
    total, *_ = batch_losses(model, data.batch(range(6)), TrainingConfig())
    total.backward()
    assert torch.count_nonzero(model.category_head.weight.grad) > 0


def test_errors(small_city):
    pairs, vocab = corpus(small_city)
    model = init_params(ModelConfig(vocab.size, 2, **TINY), 0)
    with pytest.raises(EmptyCorpusError):
        train(model, vocab, [], pairs, TrainingConfig(), VARIANT, ["Hotel", "Museum"])
    with pytest.raises(ConfigError):
        train(model, vocab, pairs, pairs, TrainingConfig(), VARIANT, None)


def test_save_run_layout(small_city, tmp_path):
    pairs, vocab = corpus(small_city)
    cfg = TrainingConfig(learning_rate=1e-3, epochs=2, batch_size=16)
    model = init_params(ModelConfig(vocab.size, 2, **TINY), 0)
    model, report = train(model, vocab, pairs[:30], pairs[30:40], cfg, VARIANT, ["Hotel", "Museum"])
    save_run(tmp_path, model, vocab, report, {"seed": 0})
    assert {p.name for p in tmp_path.iterdir()} == {"config.json", "metrics.csv", "vocab.txt", "best.ckpt"}
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 3
