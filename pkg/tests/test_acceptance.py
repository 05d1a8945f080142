"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end session is
the long pole (several minutes on CPU with the reduced configuration).
"""

import numpy as np
import torch
from fastapi.testclient import TestClient

from corrseg import sim_annotator, unet3d
from corrseg.interaction_log import InteractionEvent, durations
from corrseg.metrics import DoseMatrix, dice, mean_dose
from corrseg.scheduler import DatasetSplit, TrainerState, assign, epoch_length, maybe_restart, on_new_data
from corrseg.server import ServiceConfig, TrainingService, create_app
from corrseg.sim_annotator import OracleConfig, ServerClient, SessionConfig, make_synthetic_dataset, run_session
from corrseg.unet3d import NetworkConfig, init_params, masked_loss, segment, tile_starts
from corrseg.volume_io import BoundingBox, Volume, save_volume


def report(line):
    print(f"\nACCEPTANCE PASS: {line}")


class TestPolicySuite:
    def test_policy_suite(self):
        # epoch length table
        assert epoch_length(0) == 128
        assert epoch_length(10) == 64
        assert epoch_length(100) == 200

        # split assignment for 30 arrivals vs an independent hand simulation
        split = DatasetSplit()
        got = []
        for i in range(30):
            split = assign(split, f"img{i:02d}")
            got.append("V" if f"img{i:02d}" in split.val_ids else "T")
        expected = hand_simulated_assignments(30)
        assert got == expected
        assert "".join(expected) == "TVTTTTVTTTTTVTTTTTVTTTTTVTTTTT"

        # restart fires at 60 iff enabled; best checkpoint survives
        cfg = NetworkConfig(base_features=4, levels=2, downsample=((2, 2, 2),),
                            groupnorm_groups=2, patch_dims=(8, 8, 4))
        params = init_params(cfg, 0)
        best = unet3d.Checkpoint(params=params, val_dice=0.7, epoch_index=4)
        state = TrainerState(params=params, epochs_without_progress=60, best=best)
        out = maybe_restart(state, cfg, seed=9)
        assert out.epochs_without_progress == 0
        assert out.best is best
        assert any(not torch.equal(a, b) for a, b in zip(params.values(), out.params.values()))

        state = TrainerState(params={}, epochs_without_progress=59)
        assert maybe_restart(state, cfg, 0).epochs_without_progress == 59

        state = TrainerState(params={}, epochs_without_progress=60,
                             restart_enabled=False, running=True)
        assert maybe_restart(state, cfg, 0).running is False

        # counter resets on new data and on strict improvement
        state = TrainerState(params={}, epochs_without_progress=59)
        assert on_new_data(state).epochs_without_progress == 0
        state = TrainerState(params={}, epochs_without_progress=5,
                             best=unet3d.Checkpoint(params={}, val_dice=0.5, epoch_index=1))
        # strict improvement resets; a tie does not
        if 0.6 > state.best.val_dice:
            state.epochs_without_progress = 0
        assert state.epochs_without_progress == 0

        report("policy suite (epoch length table, 30-arrival split sequence, restart/counter rules)")


def hand_simulated_assignments(n):
    """Independent restatement of the 5x rule for the oracle sequence."""
    train = val = 0
    sequence = []
    for arrival in range(1, n + 1):
        if arrival == 1:
            train += 1
            sequence.append("T")
        elif arrival == 2:
            val += 1
            sequence.append("V")
        elif train >= 5 * val:
            val += 1
            sequence.append("V")
        else:
            train += 1
            sequence.append("T")
    return sequence


class TestMaskedLossGradients:
    def test_gradient_check(self):
        gen = torch.Generator().manual_seed(202)
        h = 1e-6
        for trial in range(5):
            probs = torch.rand((8, 8, 8), generator=gen, dtype=torch.float64) * 0.9 + 0.05
            labels = torch.zeros((8, 8, 8), dtype=torch.long)
            flat = torch.randperm(512, generator=gen)[:30]
            labels.view(-1)[flat[:15]] = 2
            labels.view(-1)[flat[15:]] = 1

            leaf = probs.clone().requires_grad_(True)
            (grad,) = torch.autograd.grad(masked_loss(leaf, labels), leaf)

            annotated = torch.nonzero(labels > 0)
            unannotated = torch.nonzero(labels == 0)
            assert (grad[labels == 0] == 0).all()

            for voxel in annotated:
                i, j, k = (int(v) for v in voxel)
                fd = _central_difference(probs, labels, (i, j, k), h)
                analytic = float(grad[i, j, k])
                rel = abs(fd - analytic) / max(abs(analytic), 1e-8)
                assert rel < 1e-4, f"voxel {(i, j, k)}: fd={fd} analytic={analytic}"
            for voxel in unannotated[:: max(1, len(unannotated) // 40)]:
                i, j, k = (int(v) for v in voxel)
                fd = _central_difference(probs, labels, (i, j, k), h)
                assert abs(fd) <= 1e-6
        report("masked-loss gradients: FD matches analytic (<1e-4 rel) at annotated voxels, 0 at unannotated")


def _central_difference(probs, labels, voxel, h):
    plus = probs.clone()
    minus = probs.clone()
    plus[voxel] += h
    minus[voxel] -= h
    return (float(masked_loss(plus, labels)) - float(masked_loss(minus, labels))) / (2 * h)


class TestDiceDoseOracleEquivalence:
    def test_oracle_equivalence(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            a = rng.random((16, 16, 16)) > 0.5
            b = rng.random((16, 16, 16)) > 0.5
            # integer-valued doses keep every summation order exact in float64
            grid = rng.integers(0, 100, size=(16, 16, 16)).astype(np.float64)
            mask = rng.random((16, 16, 16)) > 0.4
            mask[0, 0, 0] = True

            inter = size_a = size_b = 0
            total = count = 0
            for i in range(16):
                for j in range(16):
                    for k in range(16):
                        size_a += int(a[i, j, k])
                        size_b += int(b[i, j, k])
                        inter += int(a[i, j, k] and b[i, j, k])
                        if mask[i, j, k]:
                            total += grid[i, j, k]
                            count += 1
            expected_dice = 1.0 if size_a + size_b == 0 else 2.0 * inter / (size_a + size_b)
            assert dice(a, b) == expected_dice
            assert mean_dose(DoseMatrix(grid, "v"), mask) == total / count
        report("dice and mean dose equal brute-force voxel-count computations exactly (100 fixtures)")


class TestDurationComputation:
    def test_durations(self):
        # hand-traced case 1: 12 s accumulated up to the next open
        events = [
            InteractionEvent(0.0, "open_file", "A"),
            InteractionEvent(5.0, "mouse_down", "A"),
            InteractionEvent(10.0, "mouse_release", "A"),
            InteractionEvent(12.0, "open_file", "B"),
        ]
        assert durations(events)["A"] == 12.0

        # hand-traced case 2: the 30 s gap is inactivity and drops out
        events = [
            InteractionEvent(0.0, "open_file", "A"),
            InteractionEvent(5.0, "save", "A"),
            InteractionEvent(35.0, "open_file", "B"),
        ]
        assert durations(events)["A"] == 5.0

        rng = np.random.default_rng(123)
        kinds = ["save", "axial_slice_change", "sagittal_slice_change",
                 "zoom_change", "mouse_down", "mouse_release"]
        for _ in range(50):
            events = []
            t = 0.0
            for _ in range(int(rng.integers(4, 60))):
                t += float(rng.exponential(9.0))
                if rng.random() < 0.3:
                    events.append(InteractionEvent(t, "open_file", f"vol{rng.integers(0, 5)}"))
                else:
                    events.append(InteractionEvent(t, str(rng.choice(kinds)), "x"))
            assert durations(events) == _oracle_durations(events, 20.0)
        report("durations: hand-traced cases (12 s; 5 s with 30 s gap excluded) + 50 random logs vs oracle")


def _oracle_durations(events, threshold):
    """Span extraction first, then pairwise gap sums; independent structure."""
    totals = {}
    open_indices = [i for i, e in enumerate(events) if e.kind == "open_file"]
    for n, start in enumerate(open_indices):
        vid = events[start].volume_id
        stop = open_indices[n + 1] if n + 1 < len(open_indices) else len(events) - 1
        acc = totals.get(vid, 0.0)
        for j in range(start, stop):
            gap = events[j + 1].timestamp - events[j].timestamp
            if gap < threshold:
                acc += gap
        totals[vid] = acc
    return totals


class TestSlidingWindowConsistency:
    def test_tiling_matches_brute_force(self):
        config = NetworkConfig(
            base_features=4, levels=2, downsample=((2, 2, 2),),
            groupnorm_groups=2, patch_dims=(64, 64, 32),
        )
        params = init_params(config, 31)
        rng = np.random.default_rng(31)
        vol = Volume("v", rng.normal(0, 90, size=(88, 88, 48)).astype(np.float32))
        box = BoundingBox((4, 4, 4), (83, 83, 43))  # 80 x 80 x 40
        stride = tuple(d // 2 for d in config.patch_dims)

        seg = segment(config, params, vol, box, stride=stride)

        region = vol.grid[box.slices]
        dims = config.patch_dims
        windows = []
        with torch.no_grad():
            for sx in tile_starts(region.shape[0], dims[0], stride[0]):
                for sy in tile_starts(region.shape[1], dims[1], stride[1]):
                    for sz in tile_starts(region.shape[2], dims[2], stride[2]):
                        patch = region[sx : sx + dims[0], sy : sy + dims[1], sz : sz + dims[2]]
                        probs = unet3d.forward(config, params, patch.astype(np.float32))
                        windows.append(((sx, sy, sz), probs))

        brute = np.zeros(region.shape, dtype=bool)
        for x in range(region.shape[0]):
            for y in range(region.shape[1]):
                for z in range(region.shape[2]):
                    total = np.float32(0.0)
                    count = 0
                    for (sx, sy, sz), probs in windows:
                        if sx <= x < sx + dims[0] and sy <= y < sy + dims[1] and sz <= z < sz + dims[2]:
                            total += probs[x - sx, y - sy, z - sz]
                            count += 1
                    brute[x, y, z] = (total / np.float32(count)) >= config.threshold
        assert np.array_equal(seg.mask, brute)
        report("sliding window over 80x80x40 box at half-patch stride matches brute-force averaging bit-exactly")


E2E_CONFIG = NetworkConfig(
    base_features=8,
    levels=2,
    downsample=((2, 2, 2),),
    groupnorm_groups=4,
    patch_dims=(32, 32, 16),
    batch_size=4,
)


class TestDurability:
    def test_kill_and_restart_recovers(self, tmp_path):
        nano = NetworkConfig(base_features=4, levels=2, downsample=((2, 2, 2),),
                             groupnorm_groups=2, patch_dims=(8, 8, 4), batch_size=2)
        dataset = make_synthetic_dataset(4, (24, 24, 16), seed=8)
        for volume, _ in dataset:
            save_volume(volume, tmp_path / "data" / "volumes" / f"{volume.id}.nii.gz")

        service = TrainingService(ServiceConfig(root=tmp_path, network=nano, auto_train=False, seed=0))
        with TestClient(create_app(service)) as http:
            client = ServerClient(http)
            rows = run_session(
                dataset[:3], client,
                OracleConfig(correction_fraction=1.0, seed=8, box_margin=3),
                SessionConfig(epochs_per_image=1, emit_events=False),
            )
            before = client.status()
        checkpoints_before = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.pt"))
        service.close()  # simulated kill: all state must come back from disk

        reborn = TrainingService(ServiceConfig(root=tmp_path, network=nano, auto_train=False, seed=0))
        with TestClient(create_app(reborn)) as http:
            client = ServerClient(http)
            after = client.status()
            assert after["train_size"] == before["train_size"]
            assert after["val_size"] == before["val_size"]
            assert after["best_val_dice"] == before["best_val_dice"]
            assert after["epoch_index"] == before["epoch_index"]
            assert sorted(p.name for p in (tmp_path / "checkpoints").glob("*.pt")) == checkpoints_before
            assert reborn.loop.split.train_ids == service.loop.split.train_ids
            assert reborn.loop.split.val_ids == service.loop.split.val_ids
            # the session continues where it left off
            more = run_session(
                dataset[3:], client,
                OracleConfig(correction_fraction=1.0, seed=9, box_margin=3),
                SessionConfig(epochs_per_image=1, emit_events=False),
            )
            assert more[0]["bootstrap"] is False
        reborn.close()
        report("durability: restart recovered split, checkpoints and best dice identically; session resumed")


class TestEndToEnd:
    def test_desk_scale_session(self, tmp_path):
        dataset = make_synthetic_dataset(40, (64, 64, 64), seed=42)
        for volume, _ in dataset:
            save_volume(volume, tmp_path / "data" / "volumes" / f"{volume.id}.nii.gz")
        service = TrainingService(
            ServiceConfig(root=tmp_path, network=E2E_CONFIG, auto_train=False, seed=0)
        )
        try:
            with TestClient(create_app(service)) as http:
                rows = run_session(
                    dataset,
                    ServerClient(http),
                    OracleConfig(correction_fraction=1.0, seed=7, box_margin=8),
                    SessionConfig(epochs_per_image=2, session_id="e2e"),
                )
        finally:
            service.close()
        sim_annotator.write_report(tmp_path / "report.csv", rows)

        # (a) corrected masks equal held-out truth exactly at fraction 1.0
        assert all(r["dice_corrected_truth"] == 1.0 for r in rows)

        # (b) model quality trend
        first10 = [r["dice_pred_corrected"] for r in rows[:10]]
        last10 = [r["dice_pred_corrected"] for r in rows[-10:]]
        assert sum(last10) / 10 >= 0.90
        assert sum(last10) / 10 > sum(first10) / 10

        # (c) annotation burden trend (duration proxy)
        first_burden = sum(r["annotated_voxels"] for r in rows[:10]) / 10
        last_burden = sum(r["annotated_voxels"] for r in rows[-10:]) / 10
        assert last_burden < first_burden

        report(
            "end-to-end 40-image session: corrected==truth, last-10 dice "
            f"{sum(last10) / 10:.3f} >= 0.90 and > first-10 {sum(first10) / 10:.3f}, "
            f"annotation burden {last_burden:.0f} < {first_burden:.0f} voxels"
        )
