"""Acceptance criteria, each checked at its stated tolerance.

Every test records a one-line PASS/FAIL verdict (printed in the terminal
summary) before asserting, so a failing criterion still reports its numbers.
Criteria 7-9 run real pretraining and take minutes; criterion 8 dominates.
"""
import time

import numpy as np
import pytest

from delores import augment, data, dsp, evaluation, trainer
from delores.augment import AugmentConfig, MixupQueue
from delores.model import Encoder, ModelConfig, Projector
from delores.objective import barlow_loss, barlow_loss_from_embeddings, cross_correlation
from delores.optim import AdamConfig, ScheduleConfig, lr_at
from delores.tensor import (
    BatchNormState, Tensor, batchnorm, conv2d, cross_entropy, dropout, linear, maxpool2d, relu,
    temporal_pool,
)
from delores.trainer import PretrainConfig

import gradcheck as gc
from test_dsp import band_centers, tone

# Output column of the encoder architecture table, per sample.
ENCODER_TABLE = [
    ("Conv2D-1", (64, 64, 96)), ("BatchNorm2D-2", (64, 64, 96)), ("ReLU-3", (64, 64, 96)),
    ("MaxPool2D-4", (64, 32, 48)), ("Conv2D-5", (64, 32, 48)), ("BatchNorm2D-6", (64, 32, 48)),
    ("ReLU-7", (64, 32, 48)), ("MaxPool2D-8", (64, 16, 24)), ("Conv2D-9", (64, 16, 24)),
    ("BatchNorm2D-10", (64, 16, 24)), ("ReLU-11", (64, 16, 24)), ("MaxPool2D-12", (64, 8, 12)),
    ("Reshape-13", (12, 512)), ("Linear-14", (12, 2048)), ("ReLU-15", (12, 2048)),
    ("Dropout-16", (12, 2048)), ("Linear-17", (12, 2048)), ("ReLU-18", (12, 2048)),
    ("max+mean-19", (2048,)),
]

# desk-scale settings for the end-to-end criteria
SMOKE_CLIPS, SMOKE_STEPS, SMOKE_BATCH = 64, 50, 64
TASK_SPLITS = {"train": 50, "val": 20, "test": 20}  # per class, 4 classes -> 200/80/80
UNLABELED_PER_CLASS = 128  # 4 classes -> 512 clips
PRETRAIN_EPOCHS = 20
PROBE_EPOCHS = 100
FINETUNE_EPOCHS = 10
DETERMINISM_PER_CLASS, DETERMINISM_EPOCHS, DETERMINISM_BATCH = 32, 2, 32


def test_criterion_1_shapes(verdict):
    enc = Encoder(rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 1, 64, 96)).astype(np.float32)
    trace = []
    t0 = time.perf_counter()
    out = enc(x, training=False, trace=trace)
    elapsed = time.perf_counter() - t0
    got = [(name, shape) for name, shape in trace]
    want = [(name, (2,) + shape) for name, shape in ENCODER_TABLE]
    ok = got == want and out.shape == (2, 2048) and elapsed < 1.0
    verdict(1, ok, f"{sum(g == w for g, w in zip(got, want))}/{len(want)} rows match, forward {elapsed:.3f} s")
    assert ok


def _layer_checks(rng):
    st = BatchNormState(3, np.float64)
    st.running_mean[:] = [0.1, -0.2, 0.3]
    st.running_var[:] = [1.5, 0.7, 2.0]
    relu_in = rng.standard_normal((4, 5))
    relu_in[np.abs(relu_in) < 0.05] = 0.5  # keep finite differences off the kink
    labels = np.array([0, 2, 1, 1, 0])
    return {
        "conv2d": (lambda x, w, b: gc.weighted_sum(conv2d(x, w, b)),
                   [rng.standard_normal((2, 2, 4, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]),
        "batchnorm2d train": (lambda x, w, b: gc.weighted_sum(batchnorm(x, w, b, None, True)),
                              [rng.standard_normal((4, 3, 3, 4)), rng.standard_normal(3), rng.standard_normal(3)]),
        "batchnorm1d train": (lambda x, w, b: gc.weighted_sum(batchnorm(x, w, b, None, True)),
                              [rng.standard_normal((6, 5)), rng.standard_normal(5), rng.standard_normal(5)]),
        "batchnorm no affine": (lambda x: gc.weighted_sum(batchnorm(x, None, None, None, True)),
                                [rng.standard_normal((6, 5))]),
        "batchnorm eval": (lambda x, w, b: gc.weighted_sum(batchnorm(x, w, b, st, False)),
                           [rng.standard_normal((4, 3, 2, 2)), rng.standard_normal(3), rng.standard_normal(3)]),
        "maxpool2d": (lambda x: gc.weighted_sum(maxpool2d(x)), [rng.standard_normal((2, 2, 4, 6))]),
        "linear": (lambda x, w, b: gc.weighted_sum(linear(x, w, b)),
                   [rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)]),
        "relu": (lambda x: gc.weighted_sum(relu(x)), [relu_in]),
        "dropout": (lambda x: gc.weighted_sum(dropout(x, 0.3, True, np.random.default_rng(5))),
                    [rng.standard_normal((4, 6))]),
        "temporal pool": (lambda x: gc.weighted_sum(temporal_pool(x)), [rng.standard_normal((2, 5, 3))]),
        "cross-correlation + loss": (lambda a, b: barlow_loss(cross_correlation(a, b), 0.0051).loss,
                                     [rng.standard_normal((8, 6)), rng.standard_normal((8, 6))]),
        "loss via batch Gram matrices": (lambda a, b: barlow_loss_from_embeddings(a, b, 0.0051).loss,
                                         [rng.standard_normal((8, 6)), rng.standard_normal((8, 6))]),
        "cross entropy": (lambda z: cross_entropy(z, labels), [rng.standard_normal((5, 3))]),
    }


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    errors = {name: gc.check(build, arrays) for name, (build, arrays) in
              _layer_checks(np.random.default_rng(0)).items()}
    errors["composed encoder-projector-loss"] = gc.composed_check(seed=0)
    errors["composed, Gram-route loss"] = gc.composed_check(seed=0, gram=True)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 120
    verdict(2, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f} s")
    assert ok, errors


def test_criterion_3_loss_identities(verdict):
    rng = np.random.default_rng(0)
    ident = barlow_loss(Tensor(np.eye(16))).total
    hand = barlow_loss(Tensor(np.array([[1.0, -1.0], [1.0, -1.0]])), 0.0051).total
    z = rng.standard_normal((32, 10))
    diag_err = np.abs(np.diagonal(cross_correlation(Tensor(z), Tensor(z)).data) - 1).max()
    za, zb = rng.standard_normal((32, 10)), rng.standard_normal((32, 10))
    base = cross_correlation(Tensor(za), Tensor(zb)).data
    p = rng.permutation(32)
    perm_err = np.abs(cross_correlation(Tensor(za[p]), Tensor(zb[p])).data - base).max()
    s = rng.uniform(0.1, 10.0, 10)
    scale_err = max(np.abs(cross_correlation(Tensor(za * s), Tensor(zb)).data - base).max(),
                    np.abs(cross_correlation(Tensor(za), Tensor(zb * s)).data - base).max())
    ok = ident == 0 and abs(hand - 4.0102) <= 1e-9 and diag_err <= 1e-6 and perm_err <= 1e-12 and scale_err <= 1e-12
    verdict(3, ok, f"L(I)={ident}, hand case {hand:.12f}, diag err {diag_err:.1e}, "
                   f"perm err {perm_err:.1e}, scale err {scale_err:.1e}")
    assert ok


def test_criterion_4_dsp_oracle(verdict):
    centers = band_centers()
    freqs = np.geomspace(100, 7000, 10)
    bins_ok = 0
    for f in freqs:
        am = dsp.logmel(tone(f)).values.argmax(axis=0)
        bins_ok += int(np.all(am == np.argmin(np.abs(centers - f))))
    rng = np.random.default_rng(42)
    lengths = rng.integers(1024, 48000, 10)
    frames_ok = sum(dsp.logmel(dsp.AudioClip(rng.standard_normal(int(n)) * 0.1, 16000)).n_frames
                    == 1 + (int(n) - 1024) // 160 for n in lengths)
    x = rng.standard_normal(16000) * 0.1
    a = dsp.logmel(dsp.AudioClip(x, 16000), dtype=np.float64).values
    b = dsp.logmel(dsp.AudioClip(2 * x, 16000), dtype=np.float64).values
    shift_err = np.abs(b - a - 2 * np.log(2)).max()
    ok = bins_ok == 10 and frames_ok == 10 and shift_err <= 1e-6
    verdict(4, ok, f"tone bins {bins_ok}/10, frame counts {frames_ok}/10, scaling shift err {shift_err:.1e}")
    assert ok


def test_criterion_5_augmentation(verdict):
    q = MixupQueue(2048)
    for i in range(5000):
        q.push(np.array([float(i)]))
    fifo = [int(v[0]) for v in q.items()] == list(range(2952, 5000)) and len(q) == 2048

    rng = np.random.default_rng(0)
    mq = MixupQueue(8)
    mq.push(np.exp(rng.standard_normal((64, 96))))
    x = rng.standard_normal((64, 96))
    mix_err = np.abs(augment.mixup(x, mq, rng, ratio=0.0) - x).max()

    cfg = AugmentConfig()
    spec = rng.standard_normal((64, 96))
    x0 = (augment.virtual_width(96, cfg) - 96) // 2
    rrc_err = np.abs(augment.random_resized_crop(spec, cfg, rng, size=(64, 96), offset=(0, x0)) - spec).max()

    fc_max = max(augment.crop_size(64, 96, cfg, rng)[0] for _ in range(10 ** 4))
    ok = fifo and mix_err <= 1e-6 and rrc_err <= 1e-5 and fc_max <= 64
    verdict(5, ok, f"FIFO {'ok' if fifo else 'broken'}, mixup r=0 err {mix_err:.1e}, "
                   f"RRC identity err {rrc_err:.1e}, max F_c {fc_max} <= 64")
    assert ok


def test_criterion_6_schedule(verdict):
    cfg = ScheduleConfig(warmup_epochs=10, total_epochs=100)
    spe, base = 37, 0.2
    peak = lr_at(10 * spe, spe, cfg, base)
    final = lr_at(100 * spe, spe, cfg, base)
    eps = 1e-9
    jump = abs(lr_at(10 * spe + eps, spe, cfg, base) - lr_at(10 * spe - eps, spe, cfg, base))
    ok = peak == base and abs(final - base / 1000) <= 1e-9 and jump <= 1e-9
    verdict(6, ok, f"lr(warmup end)={peak!r}, lr(final)={final:.3e}, boundary jump {jump:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_7_smoke(verdict, tmp_path):
    m = data.synth_dataset(tmp_path / "smoke", classes=4, per_class=SMOKE_CLIPS // 4, seed=7)
    store = data.FeatureStore(m)
    recs = m.split("train")
    clips = np.stack([dsp.crop_frames(dsp.LogMelSpectrogram(v), 96, np.random.default_rng(i)).values
                      for i, v in enumerate(store.get_many(recs))])[:, None]
    steps_per_epoch = SMOKE_CLIPS // SMOKE_BATCH
    cfg = PretrainConfig(epochs=SMOKE_STEPS // steps_per_epoch, batch_size=SMOKE_BATCH, seed=0)
    t0 = time.perf_counter()
    tr = trainer.Pretrainer(cfg, trainer.compute_norm_stats(store, recs), steps_per_epoch)
    losses = []
    for step in range(SMOKE_STEPS):
        idx = np.random.default_rng([0, 9, step]).permutation(SMOKE_CLIPS)[:SMOKE_BATCH]
        losses.append(tr.pretrain_step(clips[np.sort(idx)]).total)
    elapsed = time.perf_counter() - t0
    ok = losses[-1] < losses[0] and elapsed < 300
    verdict(7, ok, f"loss step 1 {losses[0]:.1f} -> step {SMOKE_STEPS} {losses[-1]:.1f}, {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Pretrain on unlabeled synthetic clips, then probe and finetune both inits."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    unl = data.synth_dataset(root / "unlabeled", classes=4, per_class=UNLABELED_PER_CLASS, seed=11)
    task_m = data.synth_dataset(root / "task", classes=4, per_class=sum(TASK_SPLITS.values()), seed=1,
                                splits=TASK_SPLITS)
    cfg = PretrainConfig(epochs=PRETRAIN_EPOCHS, batch_size=64, seed=0)
    trainer.run_pretraining(unl, cfg, root / "run")
    task = evaluation.prepare(task_m)
    acc = {}
    for init in ("pretrained", "random"):
        def fresh():
            if init == "pretrained":
                return trainer.load_encoder(root / "run" / trainer.CHECKPOINT_NAME)[0]
            return evaluation.random_encoder(seed=0)

        acc[("linear", init)] = evaluation.linear_probe(
            fresh(), task, AdamConfig(max_epochs=PROBE_EPOCHS), init=init).accuracy["test"]
        acc[("finetune", init)] = evaluation.finetune(
            fresh(), task, AdamConfig(max_epochs=FINETUNE_EPOCHS), init=init).accuracy["test"]
    return acc, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_8_directional(verdict, desk_run):
    acc, elapsed = desk_run
    margin = 100 * (acc[("linear", "pretrained")] - acc[("linear", "random")])
    ok_a = margin >= 10
    ok_b = acc[("finetune", "pretrained")] >= acc[("finetune", "random")]
    verdict(8, ok_a and ok_b,
            f"(a) probe pretrained {100 * acc[('linear', 'pretrained')]:.1f} vs random "
            f"{100 * acc[('linear', 'random')]:.1f} (margin {margin:+.1f}, need >= +10) "
            f"{'ok' if ok_a else 'FAILED'}; (b) finetune pretrained {100 * acc[('finetune', 'pretrained')]:.1f} "
            f"vs random {100 * acc[('finetune', 'random')]:.1f} {'ok' if ok_b else 'FAILED'}; {elapsed / 60:.1f} min")
    assert ok_a, f"linear-probe margin {margin:+.1f} points < 10"
    assert ok_b


@pytest.mark.slow
@pytest.mark.parametrize("init", ["pretrained", "random"])
def test_finetune_at_least_probe_at_desk_scale(desk_run, init):
    # more capacity on the same data and init
    acc, _ = desk_run
    assert acc[("finetune", init)] >= acc[("linear", init)]


@pytest.mark.slow
def test_criterion_9_determinism(verdict, tmp_path):
    m = data.synth_dataset(tmp_path / "unl", classes=4, per_class=DETERMINISM_PER_CLASS, seed=5)
    store = data.FeatureStore(m)
    cfg = PretrainConfig(epochs=DETERMINISM_EPOCHS, batch_size=DETERMINISM_BATCH, seed=3, deterministic=True)
    trainer.run_pretraining(m, cfg, tmp_path / "a", store=store)
    trainer.run_pretraining(m, cfg, tmp_path / "b", store=store)
    trainer.run_pretraining(m, cfg, tmp_path / "c", store=store, stop_after_epoch=1)
    trainer.run_pretraining(m, cfg, tmp_path / "c", store=store, resume=tmp_path / "c" / trainer.CHECKPOINT_NAME)
    same = {}
    for run in ("b", "c"):
        for name in (trainer.METRICS_NAME, trainer.CHECKPOINT_NAME):
            same[(run, name)] = (tmp_path / "a" / name).read_bytes() == (tmp_path / run / name).read_bytes()
    steps = len(trainer.read_metrics(tmp_path / "a" / trainer.METRICS_NAME))
    ok = all(same.values()) and steps == DETERMINISM_EPOCHS * (4 * DETERMINISM_PER_CLASS // DETERMINISM_BATCH)
    verdict(9, ok, f"repeat run identical: metrics {same[('b', trainer.METRICS_NAME)]}, checkpoint "
                   f"{same[('b', trainer.CHECKPOINT_NAME)]}; save/load mid-run identical: metrics "
                   f"{same[('c', trainer.METRICS_NAME)]}, checkpoint {same[('c', trainer.CHECKPOINT_NAME)]} "
                   f"({steps} steps)")
    assert ok
