"""Harness tests: config validation, synthetic generators, run artifacts,
reproducibility, and the CLI front end."""

import json
from dataclasses import replace

import numpy as np
import pytest

from spikesearch.cli import main
from spikesearch.harness import (
    RunConfig,
    SyntheticSpec,
    as_batches,
    as_stereo_batches,
    default_genotype,
    generate,
    run,
    spec_for,
    substream,
)

# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_construct():
    config = RunConfig()
    assert config.task == "toy_classify"
    assert config.search == "spikedhs"
    assert (config.lr, config.momentum, config.weight_decay) == (0.025, 0.9, 3e-4)
    assert config.aux_weight == 0.4


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"task": "toy_classify", "bogus": 1, "extra": 2})


def test_config_round_trips_through_dict():
    config = RunConfig(task="toy_temporal", seed=7, tau=0.35, epochs=5)
    assert RunConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"task": "cifar"}, "unknown task"),
        ({"search": "random"}, "unknown search"),
        ({"opt": "adam"}, "unknown optimizer"),
        ({"batch_size": 0}, "positive"),
        ({"epochs": -1}, "epochs"),
        ({"disparity": 3}, "even"),
        ({"disparity": 8, "num_disparities": 4}, "matching range"),
        ({"task": "toy_stereo", "image_size": 8}, "too narrow"),
    ],
)
def test_config_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        RunConfig(**kwargs)


def test_spec_for_carries_task_fields():
    config = RunConfig(
        task="toy_temporal",
        num_train=64,
        num_val=32,
        num_test=16,
        timesteps=5,
        image_size=7,
        planted_tau=0.6,
    )
    spec = spec_for(config)
    assert spec.kind == "toy_temporal"
    assert spec.samples == 112
    assert spec.splits == (64, 32, 16)
    assert spec.timesteps == 5
    assert spec.image_size == 7
    assert spec.planted_tau == 0.6


def test_substreams_are_distinct_and_named():
    draws = {name: substream(3, name).random(4) for name in ("data", "init", "search")}
    assert not np.allclose(draws["data"], draws["init"])
    assert not np.allclose(draws["init"], draws["search"])
    again = substream(3, "data").random(4)
    assert np.array_equal(draws["data"], again)
    with pytest.raises(ValueError, match="substream"):
        substream(3, "model")


# ---------------------------------------------------------------------------
# synthetic data


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown generator"):
        SyntheticSpec(kind="imagenet")
    with pytest.raises(ValueError, match="sum"):
        SyntheticSpec(samples=10, splits=(4, 4, 4))
    with pytest.raises(ValueError, match="timesteps"):
        SyntheticSpec(kind="toy_temporal", timesteps=3)
    with pytest.raises(ValueError, match="at least 4 samples"):
        generate(SyntheticSpec(samples=2), 0)


def test_default_split_is_50_25_25():
    splits = generate(SyntheticSpec(samples=100), 0)
    assert tuple(len(p.labels) for p in splits) == (50, 25, 25)


def test_generate_is_a_pure_function_of_spec_and_seed():
    for kind, extra in [
        ("toy_classify", {}),
        ("toy_temporal", {}),
        ("toy_stereo", {"samples": 8, "image_size": 6}),
    ]:
        spec = SyntheticSpec(kind=kind, samples=extra.get("samples", 40), **{
            k: v for k, v in extra.items() if k != "samples"
        })
        a, b = generate(spec, 5), generate(spec, 5)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.movies, pb.movies)
            assert np.array_equal(pa.labels, pb.labels)
            assert (pa.right is None) == (pb.right is None)
            if pa.right is not None:
                assert np.array_equal(pa.right, pb.right)
        c = generate(spec, 6)
        assert not np.array_equal(a.train.movies, c.train.movies)


def test_class_balance_within_one_percent_at_10000():
    for kind in ("toy_classify", "toy_temporal"):
        splits = generate(SyntheticSpec(kind=kind, samples=10000), 1)
        for part in splits:
            counts = np.bincount(part.labels, minlength=2)
            assert abs(counts[0] - counts[1]) <= 0.01 * len(part.labels)


def test_classify_movies_are_static_binary_frames():
    splits = generate(SyntheticSpec(kind="toy_classify", samples=40, timesteps=3), 2)
    movies = splits.train.movies
    assert movies.shape == (20, 3, 1, 6, 6)
    assert set(np.unique(movies)) <= {0.0, 1.0}
    for t in range(1, 3):
        assert np.array_equal(movies[:, t], movies[:, 0])


def test_classify_prototypes_differ_between_classes():
    splits = generate(SyntheticSpec(kind="toy_classify", samples=400, flip_prob=0.0), 3)
    class0 = splits.train.movies[splits.train.labels == 0][:, 0]
    class1 = splits.train.movies[splits.train.labels == 1][:, 0]
    assert np.array_equal(class0[0], class0[-1])  # noise-free: one prototype each
    assert not np.array_equal(class0[0], class1[0])


def test_temporal_pulse_pairs_encode_the_class_in_the_gap():
    spec = SyntheticSpec(kind="toy_temporal", samples=60, timesteps=6)
    part = generate(spec, 4).train
    for movie, label in zip(part.movies, part.labels):
        active = [t for t in range(6) if movie[t].any()]
        assert len(active) == 2
        assert active[1] - active[0] == label + 1
        # both pulses paint the same mask at the same amplitude
        assert np.array_equal(movie[active[0]], movie[active[1]])
        values = np.unique(movie[active[0]])
        assert set(values) <= {0.0, spec.pulse_amp}


def test_temporal_frame_multisets_are_label_blind():
    # a memoryless observer sees {mask, mask, zeros...} for either class
    part = generate(SyntheticSpec(kind="toy_temporal", samples=40), 5).train
    for movie in part.movies:
        frames = sorted(movie.sum(axis=(1, 2, 3)))
        assert frames[: len(frames) - 2] == pytest.approx([0.0] * (len(frames) - 2))
        assert frames[-2] == pytest.approx(frames[-1])


def oracle_lif_spike_count(movie, tau, v_th=0.5):
    count = 0
    v = np.zeros_like(movie[0])
    for t in range(movie.shape[0]):
        v = tau * v + movie[t]
        spikes = v >= v_th
        count += int(spikes.sum())
        v = np.where(spikes, 0.0, v)
    return count


def test_teacher_relabel_is_the_rank_split_of_lif_counts():
    spec = SyntheticSpec(kind="toy_temporal", samples=48, planted_tau=0.7)
    part = generate(spec, 6).train
    counts = np.array([oracle_lif_spike_count(m, 0.7) for m in part.movies])
    order = np.argsort(counts, kind="stable")
    expected = np.zeros(len(counts), dtype=np.int64)
    expected[order[len(counts) // 2 :]] = 1
    assert np.array_equal(part.labels, expected)
    assert np.bincount(part.labels)[0] == np.bincount(part.labels)[1]


def test_stereo_views_are_the_same_canvas_shifted():
    spec = SyntheticSpec(kind="toy_stereo", samples=8, image_size=6, disparity=2)
    part = generate(spec, 7).train
    assert part.movies.shape == (4, 4, 2, 6, 6)
    assert part.right.shape == part.movies.shape
    assert np.array_equal(part.labels, np.full(4, 2.0))
    # right(x) = left(x + disparity) wherever both views see the canvas
    assert np.array_equal(part.movies[..., 2:], part.right[..., :-2])
    assert part.movies.any() and part.right.any()


def test_stereo_disparity_zero_means_identical_views():
    part = generate(SyntheticSpec(kind="toy_stereo", samples=8, disparity=0), 8).train
    assert np.array_equal(part.movies, part.right)
    assert np.array_equal(part.labels, np.zeros(4))


# ---------------------------------------------------------------------------
# batching


def test_as_batches_partitions_without_dropping():
    part = generate(SyntheticSpec(samples=40), 9).train  # 20 train samples
    batches = as_batches(part, 8)
    assert [len(b.labels) for b in batches] == [8, 8, 4]
    assert len(batches[0].inputs) == part.movies.shape[1]
    assert np.array_equal(batches[0].inputs[0], part.movies[:8, 0])
    assert np.array_equal(
        np.concatenate([b.labels for b in batches]), part.labels
    )


def test_as_stereo_batches_keeps_views_aligned():
    part = generate(SyntheticSpec(kind="toy_stereo", samples=12), 10).train
    batches = as_stereo_batches(part, 4)
    assert [len(b.disparity) for b in batches] == [4, 2]
    assert np.array_equal(batches[1].left[0], part.movies[4:, 0])
    assert np.array_equal(batches[1].right[0], part.right[4:, 0])


def test_default_genotype_reads_both_inputs_through_b3_convs():
    genotype = default_genotype(2)
    for nodes in genotype.cells.values():
        assert nodes == ((("conv3x3_sg_b3", 0), ("conv3x3_sg_b3", 1)),) * 2


# ---------------------------------------------------------------------------
# run directories

SMALL = dict(num_train=32, num_val=16, num_test=16, batch_size=16, epochs=1)


def read_json(path):
    return json.loads(path.read_text())


def test_run_writes_the_standard_artifacts(tmp_path):
    out = run(RunConfig(search="none", **SMALL), out_dir=tmp_path / "r")
    for name in ("config.json", "trajectory.json", "metrics.json", "curves.csv", "energy.csv"):
        assert (out / name).exists(), name
    metrics = read_json(out / "metrics.json")
    assert 0.0 <= metrics["test_accuracy"] <= 1.0
    assert metrics["energy_pj"] > 0
    snapshot = RunConfig.from_dict(read_json(out / "config.json"))
    assert snapshot.search == "none"
    header = (out / "curves.csv").read_text().splitlines()[0]
    assert header == "iteration,train_loss"
    assert (out / "energy.csv").read_text().startswith("layer,kind,A,fr,T,")


def test_spikedhs_run_also_writes_the_genotype(tmp_path):
    config = RunConfig(search="spikedhs", search_epochs=2, warmup_epochs=1, **SMALL)
    out = run(config, out_dir=tmp_path / "r")
    genotype = read_json(out / "genotype.json")
    assert set(genotype) == {"cells", "path"}
    assert "normal" in genotype["cells"]
    trajectory = read_json(out / "trajectory.json")
    assert len(trajectory["records"]) == 2 * 2  # epochs x batches
    assert trajectory["records"][0]["val_loss"] is None  # warm-up
    assert isinstance(trajectory["records"][-1]["val_loss"], float)


def test_tps_run_logs_tau_and_firing_rate_series(tmp_path):
    config = RunConfig(
        task="toy_temporal", search="tps", tps_steps=2, iterations=3,
        warmup_epochs=1, **SMALL,
    )
    out = run(config, out_dir=tmp_path / "r")
    records = read_json(out / "trajectory.json")["records"]
    assert [r["step"] for r in records] == [0, 1]
    for record in records:
        assert set(record["tau"]) == {"l0", "l1"}
        assert set(record["firing_rates"]) == {"l0", "l1"}
        assert all(0.0 < v < 1.0 for v in record["tau"].values())
        assert all(0.0 <= v <= 1.0 for v in record["firing_rates"].values())
    metrics = read_json(out / "metrics.json")
    assert set(metrics["tau"]) == {"l0", "l1"}


def test_dgs_run_reports_selected_temperatures(tmp_path):
    config = RunConfig(search="dgs", iterations=2, warmup_epochs=0, **SMALL)
    out = run(config, out_dir=tmp_path / "r")
    metrics = read_json(out / "metrics.json")
    assert set(metrics["surrogate_temperatures"]) == {"l0", "l1"}
    records = read_json(out / "trajectory.json")["records"]
    assert {r["site"] for r in records} == {"l0", "l1"}


def test_hns_run_reports_selected_kinds(tmp_path):
    config = RunConfig(
        search="hns", tps_steps=1, iterations=2, warmup_epochs=1, lam=0.0, **SMALL
    )
    out = run(config, out_dir=tmp_path / "r")
    kinds = read_json(out / "metrics.json")["kinds"]
    assert set(kinds) == {"l0", "l1"}
    assert set(kinds.values()) <= {"lif", "relu"}


def test_zero_epoch_run_is_evaluation_only(tmp_path):
    config = RunConfig(search="none", **{**SMALL, "epochs": 0})
    out = run(config, out_dir=tmp_path / "r")
    assert (out / "curves.csv").read_text().strip() == "iteration,train_loss"
    metrics = read_json(out / "metrics.json")
    assert 0.0 <= metrics["test_accuracy"] <= 1.0


def test_stereo_run_produces_disparity_map_and_metrics(tmp_path):
    config = RunConfig(
        task="toy_stereo", search="none", num_train=8, num_val=4, num_test=4,
        batch_size=4, epochs=1, timesteps=2, num_cells=1, image_size=12,
    )
    out = run(config, out_dir=tmp_path / "r")
    metrics = read_json(out / "metrics.json")
    for key in ("mde", "median_depth_error", "mean_disparity_error", "one_pixel_accuracy"):
        assert key in metrics
    assert (out / "disparity.pgm").read_bytes().startswith(b"P5\n")


def test_rerun_from_snapshot_is_bit_exact(tmp_path):
    config = RunConfig(
        search="tps", tps_steps=1, iterations=3, warmup_epochs=1, **SMALL
    )
    first = run(config, out_dir=tmp_path / "a")
    snapshot = RunConfig.from_dict(read_json(first / "config.json"))
    second = run(snapshot, out_dir=tmp_path / "b")
    for name in ("metrics.json", "trajectory.json", "curves.csv", "energy.csv"):
        assert (first / name).read_text() == (second / name).read_text(), name


def test_failed_run_keeps_partial_logs(tmp_path):
    # the stereo pipeline rejects search configs, but only after the run
    # directory exists; the snapshot and trajectory must survive
    config = RunConfig(task="toy_stereo", search="tps", image_size=12)
    with pytest.raises(ValueError, match="search"):
        run(config, out_dir=tmp_path / "r")
    assert (tmp_path / "r" / "config.json").exists()
    assert (tmp_path / "r" / "trajectory.json").exists()
    assert not (tmp_path / "r" / "metrics.json").exists()


def test_run_dir_root_comes_from_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SPIKESEARCH_RUNS", str(tmp_path / "root"))
    config = RunConfig(search="none", **{**SMALL, "epochs": 0})
    first = run(config)
    second = run(config)
    assert first.parent == tmp_path / "root"
    assert first.name == "toy_classify-none-seed0"
    assert second.name == "toy_classify-none-seed0-1"


def test_temporal_task_defeats_memoryless_networks(tmp_path):
    # the class lives in the pulse gap: with leak the network separates
    # it, with tau = 0 the frame multiset carries no label information
    accuracy = {}
    for tau in (0.5, 0.0):
        config = RunConfig(
            task="toy_temporal", search="none", tau=tau, seed=1,
            num_train=256, num_val=64, num_test=128, batch_size=32,
            epochs=30, lr=0.1,
        )
        out = run(config, out_dir=tmp_path / f"tau{tau}")
        accuracy[tau] = read_json(out / "metrics.json")["test_accuracy"]
    assert accuracy[0.5] >= 0.8
    assert accuracy[0.0] <= 0.6


# ---------------------------------------------------------------------------
# CLI


def write_config(tmp_path, **doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_cli_train_exits_zero_and_snapshots_the_merge(tmp_path, capsys):
    path = write_config(tmp_path, **SMALL, seed=3)
    code = main(["train", "--config", str(path), "--seed", "5",
                 "--out", str(tmp_path / "r")])
    assert code == 0
    snapshot = read_json(tmp_path / "r" / "config.json")
    assert snapshot["seed"] == 5  # the flag wins over the document
    assert snapshot["search"] == "none"  # forced by the subcommand
    assert "run dir:" in capsys.readouterr().out


def test_cli_eval_forces_a_zero_epoch_run(tmp_path):
    path = write_config(tmp_path, **SMALL)
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "r")]) == 0
    snapshot = read_json(tmp_path / "r" / "config.json")
    assert snapshot["epochs"] == 0 and snapshot["search"] == "none"


def test_cli_rejects_unknown_config_keys(tmp_path, capsys):
    path = write_config(tmp_path, bogus=1)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 1
    assert "unknown config keys" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_cli_failed_run_exits_nonzero_with_partial_logs(tmp_path, capsys):
    code = main(["tps", "--task", "toy_stereo", "--image-size", "12",
                 "--out", str(tmp_path / "r")])
    assert code == 1
    assert "error:" in capsys.readouterr().err
    assert (tmp_path / "r" / "config.json").exists()
    assert not (tmp_path / "r" / "metrics.json").exists()


def test_cli_gen_data_writes_the_dataset(tmp_path):
    code = main(["gen-data", "--task", "toy_stereo", "--image-size", "10",
                 "--num-train", "8", "--num-val", "4", "--num-test", "4",
                 "--out", str(tmp_path / "d")])
    assert code == 0
    archive = np.load(tmp_path / "d" / "dataset.npz")
    assert set(archive.files) == {
        "train_movies", "train_labels", "train_right",
        "val_movies", "val_labels", "val_right",
        "test_movies", "test_labels", "test_right",
    }
    assert archive["train_movies"].shape == (8, 4, 2, 10, 10)
    meta = read_json(tmp_path / "d" / "meta.json")
    assert meta["task"] == "toy_stereo"


def test_cli_gen_data_matches_generate(tmp_path):
    assert main(["gen-data", "--num-train", "8", "--num-val", "4", "--num-test", "4",
                 "--seed", "2", "--out", str(tmp_path / "d")]) == 0
    archive = np.load(tmp_path / "d" / "dataset.npz")
    config = RunConfig(num_train=8, num_val=4, num_test=4, seed=2)
    splits = generate(spec_for(config), 2)
    assert np.array_equal(archive["train_movies"], splits.train.movies)
    assert np.array_equal(archive["test_labels"], splits.test.labels)
