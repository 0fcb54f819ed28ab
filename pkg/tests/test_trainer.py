import itertools
import os

import numpy as np
import pytest
import torch

from asdkit.corpus import SyntheticSpec, generate_synthetic
from asdkit.errors import KeyMismatch, NonFiniteLoss, SingleClassError, UsageError
from asdkit.frontend import SpectralConfig
from asdkit.trainer import TrainConfig, average_scores, featurize, train

SPECTRAL = SpectralConfig(dft_sizes=(1024,), spectrum_size=16000)


@pytest.fixture(scope="module")
def toy():
    man = generate_synthetic(SyntheticSpec(machines=2, attributes_per_machine=2, clips_per_attribute=12, seed=3))
    clips = man.select(split="train")
    labels = {c.clip_id: f"{c.machine}|{c.attribute}" for c in clips}
    return clips, labels, featurize(clips, SPECTRAL)


def _cfg(**kw):
    base = dict(epochs=4, batch_size=16, small_network=True, embedding_dim=16, n_subclusters=4,
                score_checkpoint_epochs=(2, 3, 4))
    return TrainConfig(**{**base, **kw})


def test_loss_decreases(toy):
    clips, labels, feats = toy
    log = train(clips, labels, SPECTRAL, _cfg(epochs=8, score_checkpoint_epochs=(8,)), features=feats).log
    assert len(log.epochs) == 8
    assert log.losses[-1] < log.losses[0]


def test_checkpoints_on_disk(toy, tmp_path):
    clips, labels, feats = toy
    cfg = _cfg(epochs=16, score_checkpoint_epochs=(12, 14, 16), aug_prob=0.0, featex_prob=0.0)
    res = train(clips[:32], labels, SPECTRAL, cfg, out_dir=tmp_path, config_hash="h1", features=feats[:32])
    assert sorted(os.listdir(tmp_path)) == [f"checkpoint_epoch={e}.npz" for e in (12, 14, 16)]
    assert sorted(res.snapshots) == [12, 14, 16]


def test_seeded_determinism(toy):
    clips, labels, feats = toy
    a = train(clips, labels, SPECTRAL, _cfg(seed=5), features=feats)
    b = train(clips, labels, SPECTRAL, _cfg(seed=5), features=feats)
    assert a.log.losses == b.log.losses
    assert a.log.deterministic


@pytest.mark.parametrize("mode", ["none", "featex"])
def test_other_loss_modes_run(toy, mode):
    clips, labels, feats = toy
    res = train(clips, labels, SPECTRAL, _cfg(loss_mode=mode, epochs=2, score_checkpoint_epochs=(2,)), features=feats)
    assert np.isfinite(res.log.losses).all()


def test_fixed_head_untouched(toy):
    clips, labels, feats = toy
    torch.manual_seed(0)
    res = train(clips, labels, SPECTRAL, _cfg(epochs=2, score_checkpoint_epochs=(2,)), features=feats)
    from asdkit.objectives import AngularHead

    fresh = AngularHead(res.objective.cat_head.dim, res.vocabulary.C, 4, trainable=False, seed=0)
    assert res.objective.cat_head.centers.numpy().tobytes() == fresh.centers.numpy().tobytes()


def test_single_class(toy):
    clips, _, feats = toy
    with pytest.raises(SingleClassError):
        train(clips, {c.clip_id: "x" for c in clips}, SPECTRAL, _cfg(), features=feats)


def test_missing_label(toy):
    clips, labels, feats = toy
    partial = dict(list(labels.items())[1:])
    with pytest.raises(UsageError):
        train(clips, partial, SPECTRAL, _cfg(), features=feats)


def test_non_finite_loss_reports_context(toy):
    clips, labels, feats = toy
    feats = [type(f)(f.spectrum * np.float32("nan"), f.spectrograms) for f in feats]
    with pytest.raises(NonFiniteLoss, match="epoch 1, step 0"):
        train(clips, labels, SPECTRAL, _cfg(), features=feats)


def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(epochs=10, score_checkpoint_epochs=(12,))
    with pytest.raises(UsageError):
        TrainConfig(loss_mode="arcface")
    with pytest.raises(UsageError):
        TrainConfig(lr=0.0)


def test_train_log_csv(toy, tmp_path):
    clips, labels, feats = toy
    res = train(clips, labels, SPECTRAL, _cfg(epochs=2, score_checkpoint_epochs=(2,)), config_hash="abc",
                features=feats)
    res.log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].split(",")[4] == "abc"


def test_adamw_zero_gradient_only_decays():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0]))
    opt = torch.optim.AdamW([p], lr=1e-3, weight_decay=1e-2)
    p.grad = torch.zeros(3)
    before = p.detach().clone()
    opt.step()
    torch.testing.assert_close(p.detach(), before * (1 - 1e-3 * 1e-2), rtol=0, atol=1e-7)


def test_average_scores():
    t = {"a": 0.3, "b": 1.5}
    assert average_scores([t, t, t]) == t
    assert average_scores([{"a": 0.0}, {"a": 1.0}, {"a": 2.0}]) == {"a": 1.0}
    with pytest.raises(KeyMismatch):
        average_scores([{"a": 0.0, "b": 1.0}, {"a": 1.0}])


def test_average_scores_permutation_invariant():
    rng = np.random.default_rng(0)
    tables = [{k: float(rng.standard_normal()) for k in "abcde"} for _ in range(4)]
    ref = average_scores(tables)
    for perm in itertools.permutations(tables):
        assert average_scores(list(perm)) == ref
