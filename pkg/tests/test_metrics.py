import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from sftnkit.blocknet import build_architecture, init_params, plain_net
from sftnkit.checkpoint import checkpoint_hash
from sftnkit.data import Dataset, gen_synth_vision, split_train_test
from sftnkit.metrics import (MetricError, SimilarityReport, accuracy, accuracy_from_logits, cka_linear,
                             entropy_from_logits, kl_from_logits, linear_probe_transfer, prediction_entropy,
                             similarity_csv, similarity_report, teacher_student_kl, top1_agreement)
from sftnkit.nn import Module
from sftnkit.tensor import Tensor
from sftnkit.trainer import SgdConfig, train_supervised


class _Fixed(Module):
    """Returns the same logits for every sample."""

    def __init__(self, logits):
        super().__init__()
        self.logits = np.asarray(logits, np.float64)

    def forward(self, x):
        return Tensor(np.tile(self.logits, (x.shape[0], 1)))


def _ds(n, k=10, label=None, seed=0):
    r = np.random.default_rng(seed)
    labels = np.full(n, label) if label is not None else r.integers(0, k, size=n)
    return Dataset(r.uniform(size=(n, 3, 16, 16)), labels, k)


# -- accuracy ------------------------------------------------------------------------------

def test_constant_predictor_on_single_class_set():
    assert accuracy(_Fixed([0, 5.0, 1]), _ds(7, 3, label=1)) == 1.0


def test_untrained_net_on_random_labels_is_near_chance():
    acc = accuracy(build_architecture("student-S3"), _ds(1000, seed=1))
    assert abs(acc - 0.1) < 0.03


def test_accuracy_is_additive_over_partitions():
    logits = np.random.default_rng(0).normal(size=(30, 4))
    labels = np.random.default_rng(1).integers(0, 4, size=30)
    whole = accuracy_from_logits(logits, labels)
    parts = accuracy_from_logits(logits[:10], labels[:10]) * 10 + accuracy_from_logits(logits[10:], labels[10:]) * 20
    assert abs(whole - parts / 30) < 1e-12


def test_empty_dataset_errors():
    empty = Dataset(np.zeros((0, 3, 16, 16)), np.zeros(0, int), 10)
    for fn in (lambda: accuracy(_Fixed(np.zeros(10)), empty),
               lambda: prediction_entropy(_Fixed(np.zeros(10)), empty),
               lambda: teacher_student_kl(_Fixed(np.zeros(10)), _Fixed(np.zeros(10)), empty)):
        with pytest.raises(MetricError):
            fn()


# -- KL -----------------------------------------------------------------------------------------

def test_kl_self_is_zero():
    net = build_architecture("student-S3", seed=0)
    assert teacher_student_kl(net, net, _ds(20)) == 0.0


def test_kl_one_hot_vs_uniform_is_ln2():
    one_hot = np.array([[60.0, 0.0]])  # exp(-60) is below double-precision resolution next to 1
    assert abs(kl_from_logits(one_hot, np.zeros((1, 2))) - math.log(2)) < 1e-12


def test_kl_mixed_batch_is_mean_of_per_sample_oracle():
    t = np.array([[1.0, 0.0, -1.0], [0.2, 0.3, 0.1]])
    s = np.array([[0.0, 0.5, 0.0], [2.0, -1.0, 0.0]])

    def kl(a, b):
        p, q = np.exp(a) / np.exp(a).sum(), np.exp(b) / np.exp(b).sum()
        return float(np.sum(p * np.log(p / q)))

    assert abs(kl_from_logits(t, s) - (kl(t[0], s[0]) + kl(t[1], s[1])) / 2) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_nonnegative_and_finite(seed):
    r = np.random.default_rng(seed)
    t, s = r.normal(0, 30, size=(4, 5)), r.normal(0, 30, size=(4, 5))
    v = kl_from_logits(t, s)
    assert np.isfinite(v) and v >= 0


# -- entropy ------------------------------------------------------------------------------------

def test_entropy_examples():
    assert abs(entropy_from_logits(np.zeros((2, 10))) - math.log(10)) < 1e-12
    assert entropy_from_logits(np.array([[800.0] + [0.0] * 9])) < 1e-12
    assert abs(entropy_from_logits(np.array([[0.0, 0.0] + [-800.0] * 8])) - math.log(2)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_entropy_in_range(seed, k):
    v = entropy_from_logits(np.random.default_rng(seed).normal(0, 20, size=(5, k)))
    assert -1e-12 <= v <= math.log(k) + 1e-12


# -- CKA ----------------------------------------------------------------------------------------

def test_cka_self_and_invariances(rng):
    x = rng.normal(size=(20, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert abs(cka_linear(x, x) - 1) < 1e-12
    assert abs(cka_linear(x, x @ q) - 1) < 1e-8
    assert abs(cka_linear(x, -3.5 * x) - 1) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_cka_matches_hsic_oracle(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(6, 3)), r.normal(size=(6, 4))
    assert abs(cka_linear(x, y) - oracles.cka(x, y)) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 12))
def test_cka_symmetric_and_bounded(seed, n):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(n, 3)), r.normal(size=(n, 5))
    a, b = cka_linear(x, y), cka_linear(y, x)
    assert abs(a - b) < 1e-10
    assert -1e-12 <= a <= 1 + 1e-9


def test_cka_errors():
    with pytest.raises(MetricError, match="at least 3"):
        cka_linear(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(MetricError, match="zero-variance"):
        cka_linear(np.ones((4, 2)), np.random.default_rng(0).normal(size=(4, 2)))


# -- agreement and reports -------------------------------------------------------------------------

def test_agreement_with_itself_is_one():
    net = build_architecture("student-S3", seed=0)
    assert top1_agreement(net, net, _ds(15)) == 1.0


def test_similarity_report_roundtrip():
    ds = _ds(12)
    t, s = build_architecture("teacher-S3", seed=0), build_architecture("student-S3", seed=1)
    rep = similarity_report(t, s, ds)
    d = json.loads(rep.to_json())
    assert d["kl_reduction"] == "mean-per-sample"
    assert 0 <= d["cka"] <= 1 and d["mean_kl"] >= 0
    text = similarity_csv(rep.csv_rows("sftn"))
    assert text.splitlines()[0] == "teacher_method,metric,value"
    assert len(text.splitlines()) == 6


def test_similarity_report_rejects_out_of_range():
    with pytest.raises(MetricError):
        SimilarityReport(mean_kl=-0.1, cka=0.5, top1_agreement=0.5, teacher_entropy=0.1, student_entropy=0.1)


# -- linear probe --------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def probe_setup():
    tr, te = split_train_test(gen_synth_vision("primary", 360, seed=5))
    net = init_params(plain_net((8, 16), (3, 16, 16), 10, name="probe-src"), 0)
    train_supervised(net, tr, SgdConfig(epochs=6, milestones=(4,), batch_size=32), seed=0)
    return net, tr, te


def test_probe_zero_epochs_is_chance(probe_setup):
    net, tr, te = probe_setup
    assert abs(linear_probe_transfer(net, tr, te, epochs=0) - 0.1) <= 0.03


def test_probe_on_source_tracks_own_accuracy_and_keeps_extractor(probe_setup):
    net, tr, te = probe_setup
    before = checkpoint_hash(net)
    acc = linear_probe_transfer(net, tr, te, epochs=30)
    assert checkpoint_hash(net) == before
    assert acc >= accuracy(net, te) - 0.03


def test_probe_handles_different_class_count(probe_setup):
    net, _, _ = probe_setup
    small = gen_synth_vision("transfer", 60, seed=1)
    labels = small.labels % 4
    tr = Dataset(small.images[:40], labels[:40], 4)
    te = Dataset(small.images[40:], labels[40:], 4)
    acc = linear_probe_transfer(net, tr, te, epochs=3)
    assert 0.0 <= acc <= 1.0
