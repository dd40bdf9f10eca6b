import pytest
import torch

from stagefuse.backbones import (
    LogisticBackbone,
    create_backbone,
    predict_proba,
)
from stagefuse.datasets import Preprocessor
from stagefuse.errors import CheckpointError, InvalidConfig, InvalidInput
from stagefuse.staging import (
    StageHyperparams,
    StagePlan,
    build_stage_dataset,
    partition_fakes,
    run_multistage,
)
from stagefuse.synthetic import synthetic_images

from .util import balanced_accuracy, gaussian_toy, tmp_path


def fake_ids(n):
    return [f"fake/{i:04d}.png" for i in range(n)]


def toy_pool(n_real, n_fake, seed=0):
    """Real ids, fake ids and a fetch callback over toy feature vectors"""
    x, y = gaussian_toy(n_real, n_fake, seed=seed)
    ids = [f"real/{i:04d}" for i in range(n_real)]
    ids += [f"fake/{i:04d}" for i in range(n_fake)]
    table = dict(zip(ids, x))
    return ids[:n_real], ids[n_real:], lambda sample_id, seed: table[sample_id]


def run_toy(out_dir, k, epochs, seed=0, n_real=40, n_fake=120, **options):
    real, fake, fetch = toy_pool(n_real, n_fake)
    plan = partition_fakes(fake, k, seed, real_ids=real)
    hp = StageHyperparams(epochs_per_stage=epochs, batch_size=16,
                          initial_lr=0.01, **options)
    model = LogisticBackbone(1, seed=seed)
    result = run_multistage(model, plan, hp, fetch=fetch, out_dir=out_dir)
    return model, result


@pytest.mark.parametrize("n, k", [(10, 3), (500, 5), (7, 7), (4, 1)])
def test_partition_is_balanced_and_complete(n, k):
    plan = partition_fakes(fake_ids(n), k, seed=0)
    assert plan.k == k
    sizes = plan.subset_sizes()
    assert max(sizes) - min(sizes) <= 1
    assert sorted(plan.fake_ids) == fake_ids(n)


def test_ten_fakes_into_three_subsets():
    assert sorted(partition_fakes(fake_ids(10), 3, 0).subset_sizes()) \
        == [3, 3, 4]


def test_partition_ignores_input_order():
    ids = fake_ids(50)
    forward = partition_fakes(ids, 4, seed=9)
    backward = partition_fakes(reversed(ids), 4, seed=9)
    assert forward.fake_subsets == backward.fake_subsets
    assert partition_fakes(ids, 4, seed=10).fake_subsets \
        != forward.fake_subsets


def test_partition_errors():
    with pytest.raises(InvalidConfig, match="at least 1"):
        partition_fakes(fake_ids(3), 0, 0)
    with pytest.raises(InvalidConfig, match="cannot split 3"):
        partition_fakes(fake_ids(3), 4, 0)
    with pytest.raises(InvalidInput, match="no fake ids"):
        partition_fakes([], 1, 0)
    with pytest.raises(InvalidInput, match="duplicates"):
        partition_fakes(["a", "a", "b"], 2, 0)


def test_plan_rejects_overlap():
    with pytest.raises(InvalidInput, match="disjoint"):
        StagePlan(["r"], [["a", "b"], ["b", "c"]], 0)
    with pytest.raises(InvalidInput, match="unbalanced"):
        StagePlan(["r"], [["a", "b", "c"], ["d"]], 0)


def test_plan_manifest_round_trip():
    plan = partition_fakes(fake_ids(9), 2, 5, real_ids=["real/b", "real/a"])
    assert plan.real_ids == ("real/a", "real/b")
    restored = StagePlan.from_manifest(plan.manifest())
    assert restored == plan
    assert restored.ids_hash() == plan.ids_hash()
    assert "fake_subsets" not in plan.manifest(include_ids=False)


def test_stage_dataset():
    plan = partition_fakes(fake_ids(6), 2, 0, real_ids=["r1", "r2"])
    entries = build_stage_dataset(plan, 2)
    assert sorted(entries) == sorted(
        [("r1", 0), ("r2", 0)] + [(fid, 1) for fid in plan.fake_subsets[1]])
    assert build_stage_dataset(plan, 2) == entries
    with pytest.raises(InvalidInput, match="outside 1..2"):
        build_stage_dataset(plan, 3)


def test_epochs_per_backbone():
    assert StageHyperparams.for_backbone("conv").epochs_per_stage == 5
    assert StageHyperparams.for_backbone("attention").epochs_per_stage == 5
    assert StageHyperparams.for_backbone("wavelet").epochs_per_stage == 4
    hp = StageHyperparams.for_backbone("wavelet", epochs_per_stage=2)
    assert hp.epochs_per_stage == 2


def test_hyperparameter_validation():
    with pytest.raises(InvalidConfig, match="plateau_factor"):
        StageHyperparams(plateau_factor=1.0)
    with pytest.raises(InvalidConfig, match="monitor"):
        StageHyperparams(monitor="train_loss")


def test_plateau_cuts_after_patience_bad_epochs():
    hp = StageHyperparams()
    model = LogisticBackbone(1)
    optimizer = torch.optim.Adam(model.parameters(), lr=hp.initial_lr)
    scheduler = hp.plateau_scheduler(optimizer)
    scheduler.step(0.7)
    for _ in range(2):
        scheduler.step(0.7)
    assert optimizer.param_groups[0]["lr"] == 1e-4
    scheduler.step(0.7)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-5)
    for _ in range(2):
        scheduler.step(0.7)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-5)
    scheduler.step(0.7)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-6)


def test_plateau_with_patience_one():
    hp = StageHyperparams(plateau_patience=1)
    model = LogisticBackbone(1)
    optimizer = torch.optim.Adam(model.parameters(), lr=hp.initial_lr)
    scheduler = hp.plateau_scheduler(optimizer)
    scheduler.step(0.7)
    scheduler.step(0.6)
    assert optimizer.param_groups[0]["lr"] == 1e-4
    scheduler.step(0.6)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-5)
    with pytest.raises(InvalidConfig, match="plateau_patience"):
        StageHyperparams(plateau_patience=0)


def test_stages_warm_start_from_disk():
    out = tmp_path() / "run"
    model, result = run_toy(out, k=3, epochs=2)
    assert [c.stage for c in result.checkpoints] == [1, 2, 3]
    for prev, cur in zip(result.checkpoints, result.checkpoints[1:]):
        assert cur.start_hash == prev.end_hash
    assert all(c.path.is_file() for c in result.checkpoints)
    frame = result.log_frame()
    assert list(frame.stage) == [1, 1, 2, 2, 3, 3]
    assert list(frame.epoch) == [1, 2] * 3
    # every stage re-warms the learning rate
    assert set(frame.lr[frame.epoch == 1]) == {0.01}
    assert frame.val_loss.isna().all()


def test_runs_are_deterministic():
    _, one = run_toy(tmp_path() / "a", k=2, epochs=2, seed=4)
    _, two = run_toy(tmp_path() / "b", k=2, epochs=2, seed=4)
    assert one.final_checkpoint.end_hash == two.final_checkpoint.end_hash
    assert one.log == two.log


def test_resume_after_losing_the_last_stage():
    out = tmp_path() / "run"
    _, full = run_toy(out, k=5, epochs=1)
    (out / "stage-5.pt").unlink()
    _, resumed = run_toy(out, k=5, epochs=1)
    assert resumed.final_checkpoint.end_hash == full.final_checkpoint.end_hash
    assert resumed.log == full.log


def test_existing_checkpoints_from_another_plan():
    out = tmp_path() / "run"
    run_toy(out, k=2, epochs=1, seed=0)
    with pytest.raises(InvalidConfig, match="different stage plan"):
        run_toy(out, k=2, epochs=1, seed=1)


def test_checkpoint_write_failure_names_last_durable():
    out = tmp_path() / "run"
    blocker = out / "stage-2.pt"
    blocker.mkdir(parents=True)
    (blocker / "occupied").write_text("")
    with pytest.raises(CheckpointError) as info:
        run_toy(out, k=3, epochs=1)
    assert info.value.last_durable == out / "stage-1.pt"


def test_per_epoch_checkpoints():
    out = tmp_path() / "run"
    run_toy(out, k=2, epochs=3, checkpoint_every_epoch=True)
    names = sorted(path.name for path in out.glob("*.pt"))
    assert names == [
        "stage-1-epoch-1.pt", "stage-1-epoch-2.pt", "stage-1.pt",
        "stage-2-epoch-1.pt", "stage-2-epoch-2.pt", "stage-2.pt",
    ]


def test_continued_learning_rate_resumes():
    out = tmp_path() / "run"
    _, full = run_toy(out, k=3, epochs=2, continue_lr=True)
    (out / "stage-3.pt").unlink()
    _, resumed = run_toy(out, k=3, epochs=2, continue_lr=True)
    assert resumed.final_checkpoint.end_hash == full.final_checkpoint.end_hash


def test_validation_drives_the_schedule():
    real, fake, fetch = toy_pool(20, 40)
    x, y = gaussian_toy(10, 10, seed=1)
    plan = partition_fakes(fake, 2, 0, real_ids=real)
    hp = StageHyperparams(epochs_per_stage=2, batch_size=8, initial_lr=0.01)
    result = run_multistage(
        LogisticBackbone(1), plan, hp, fetch=fetch,
        out_dir=tmp_path() / "run", validation=list(zip(x, y.tolist())))
    frame = result.log_frame()
    assert frame.val_loss.notna().all()
    assert frame.val_acc.between(0, 1).all()


def test_multistage_beats_imbalanced_single_stage():
    x_test, y_test = gaussian_toy(1000, 1000, seed=99)
    scores = {}
    for k, epochs in ((5, 5), (1, 25)):
        model, _ = run_toy(tmp_path() / f"k{k}", k=k, epochs=epochs,
                           n_real=200, n_fake=1000)
        scores[k] = balanced_accuracy(y_test, predict_proba(model, x_test))
    assert scores[5] > 0.64
    assert scores[5] - scores[1] >= 0.05


def traceless_image_pool(backbone, n_real, n_fake, traceless, seed=0):
    """Synthetic real/fake ids and fetch; ``traceless`` fakes lack the artifact

    Clean-looking fakes outnumber reals in the raw pool but not in a
    balanced stage, so the two schedules disagree on them.
    """
    pre = Preprocessor.for_backbone(backbone)
    size = backbone.input_size
    plain = synthetic_images(n_real + traceless, 0, size, seed)
    marked = synthetic_images(0, n_fake - traceless, size, seed)
    table = {}
    real, fake = [], []
    for i, (img, _) in enumerate(plain):
        key = f"real/{i:04d}" if i < n_real else f"fake/plain-{i:04d}"
        (real if i < n_real else fake).append(key)
        table[key] = pre(img)
    for i, (img, _) in enumerate(marked):
        fake.append(f"fake/marked-{i:04d}")
        table[fake[-1]] = pre(img)
    return real, fake, lambda sample_id, seed: table[sample_id]


@pytest.mark.slow
def test_multistage_beats_single_stage_on_synthetic_images():
    held = synthetic_images(100, 100, size=32, seed=1)
    scores = {}
    for k, epochs in ((5, 3), (1, 15)):
        backbone = create_backbone("conv", 32, seed=0)
        real, fake, fetch = traceless_image_pool(backbone, 100, 500, 200)
        plan = partition_fakes(fake, k, 0, real_ids=real)
        hp = StageHyperparams(epochs_per_stage=epochs, batch_size=16,
                              initial_lr=1e-3)
        run_multistage(backbone, plan, hp, fetch=fetch,
                       out_dir=tmp_path() / f"k{k}")
        pre = Preprocessor.for_backbone(backbone)
        x = torch.stack([pre(img) for img, _ in held])
        labels = [label for _, label in held]
        scores[k] = balanced_accuracy(labels, predict_proba(backbone, x))
    assert scores[5] - scores[1] >= 0.05, scores
