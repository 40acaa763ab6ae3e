import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsteer import frames
from evsteer.frames import (AddressEvent, Dataset, DvsAccumulator, Recording,
                            aps_normalize, aps_resize, assemble_dataset,
                            dvs_normalize, exposure_augment, label_from_target,
                            load_dataset, load_recording, read_events,
                            save_dataset, save_recording, subsample_address,
                            write_events)
from evsteer.nnet import Decision


def make_events(ts, xs, ys, pols):
    arr = np.zeros(len(ts), dtype=frames.EVENT_DTYPE)
    arr["t"], arr["x"], arr["y"] = ts, xs, ys
    arr["polarity"] = pols
    return arr


class TestSubsample:
    @pytest.mark.parametrize("xy,expect", [
        ((0, 0), (0, 0)),
        ((239, 179), (35, 35)),
        ((120, 90), (18, 18)),
    ])
    def test_examples(self, xy, expect):
        assert subsample_address(*xy) == expect

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            subsample_address(240, 0)
        with pytest.raises(ValueError):
            subsample_address(0, -1)

    def test_surjective(self):
        xs = {subsample_address(x, 0)[0] for x in range(240)}
        ys = {subsample_address(0, y)[1] for y in range(180)}
        assert xs == set(range(36))
        assert ys == set(range(36))

    @given(st.integers(0, 238), st.integers(0, 178))
    def test_monotone(self, x, y):
        bx0, by0 = subsample_address(x, y)
        bx1, by1 = subsample_address(x + 1, y + 1)
        assert bx1 >= bx0 and by1 >= by0


class TestAccumulator:
    def test_fifty_on_events_reach_three_quarters(self):
        acc = DvsAccumulator()
        for _ in range(50):
            assert acc.add(AddressEvent(0, 10, 10, +1)) is None
        bx, by = subsample_address(10, 10)
        assert acc.values[by, bx] == pytest.approx(0.75)

    def test_alternating_five_thousand_emits_neutral(self):
        acc = DvsAccumulator()
        hist = None
        for i in range(5000):
            hist = acc.add(AddressEvent(i, 5, 5, +1 if i % 2 == 0 else -1))
        assert hist is not None
        np.testing.assert_allclose(hist, 0.5)
        assert acc.events_in == 0

    def test_no_emission_below_capacity(self):
        acc = DvsAccumulator()
        ev = make_events(np.arange(4999), np.zeros(4999), np.zeros(4999),
                         np.ones(4999))
        assert acc.add_batch(ev) == []
        assert acc.events_in == 4999

    def test_batch_matches_scalar_path(self, rng):
        n = 12_000
        ev = make_events(np.arange(n), rng.integers(0, 240, n),
                         rng.integers(0, 180, n), rng.integers(0, 2, n))
        acc_a, acc_b = DvsAccumulator(), DvsAccumulator()
        got_a = acc_a.add_batch(ev)
        got_b = []
        for e in ev:
            hist = acc_b.add(AddressEvent(int(e["t"]), int(e["x"]), int(e["y"]),
                                          +1 if e["polarity"] else -1))
            if hist is not None:
                got_b.append(hist)
        assert len(got_a) == len(got_b) == 2
        for (t, ha), hb in zip(got_a, got_b):
            np.testing.assert_allclose(ha, hb)
        np.testing.assert_allclose(acc_a.values, acc_b.values)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
    def test_deviation_sum_counts_polarity_balance(self, seed, n_frames):
        rng = np.random.default_rng(seed)
        cap = 500
        acc = DvsAccumulator(cap)
        n = cap * n_frames
        pol = rng.integers(0, 2, n)
        ev = make_events(np.arange(n), rng.integers(0, 240, n),
                         rng.integers(0, 180, n), pol)
        emitted = acc.add_batch(ev)
        assert len(emitted) == n_frames
        for k, (_, hist) in enumerate(emitted):
            window = pol[k * cap:(k + 1) * cap]
            balance = int(np.sum(window == 1)) - int(np.sum(window == 0))
            assert round(float((hist - 0.5).sum() * 200)) == balance


class TestDvsNormalize:
    def test_flat_histogram_stays_neutral(self):
        hist = np.full((36, 36), 0.5)
        np.testing.assert_array_equal(dvs_normalize(hist).values, 0.5)

    def test_clipped_extreme_maps_to_one(self, rng):
        hist = np.full((36, 36), 0.5)
        hist += rng.normal(0, 0.01, hist.shape)
        hist[3, 3] = 10.0  # far beyond 3 sigma, must clip to exactly 1.0
        out = dvs_normalize(hist).values
        assert out[3, 3] == pytest.approx(1.0)

    def test_exact_three_sigma_maps_to_one(self):
        # fixed-point solve for a bin deviation s equal to exactly 3 sigma
        # of the finished histogram
        a = 0.2
        s = a * np.sqrt(18.0 / (1296.0 - 9.0))
        hist = np.full((36, 36), 0.5)
        hist[0, 0] = 0.5 + a
        hist[0, 1] = 0.5 - a
        for _ in range(60):
            hist[5, 5] = 0.5 + s
            s = 3 * np.std(hist)
        hist[5, 5] = 0.5 + s
        assert s == pytest.approx(3 * np.std(hist), rel=1e-12)
        out = dvs_normalize(hist).values
        assert out[5, 5] == pytest.approx(1.0)
        assert out[0, 0] == 1.0  # beyond 3 sigma, clipped to the extreme
        assert out[0, 1] == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_histogram_properties(self, seed):
        rng = np.random.default_rng(seed)
        hist = np.full((36, 36), 0.5)
        n_active = int(rng.integers(2, 80))
        idx = rng.choice(36 * 36, n_active, replace=False)
        hist.reshape(-1)[idx] += rng.normal(0, 0.2, n_active)
        out = dvs_normalize(hist).values
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_array_equal(out[hist == 0.5], 0.5)
        # ordering of unclipped bins is preserved (strictly monotone map)
        sigma = np.std(hist)
        dev = hist - 0.5
        unclipped = np.abs(dev) < 3 * sigma
        a = dev[unclipped]
        b = out[unclipped] - 0.5
        order_a = np.argsort(a, kind="stable")
        order_b = np.argsort(b, kind="stable")
        matches = np.mean(order_a == order_b)
        assert matches >= 0.99


class TestApsResize:
    def test_constant(self):
        out = aps_resize(np.full((180, 240), 0.3))
        assert out.shape == (36, 36)
        np.testing.assert_array_equal(out, 0.3)

    def test_step_edge_lands_at_column_18(self):
        frame = np.zeros((180, 240))
        frame[:, 120:] = 1.0
        out = aps_resize(frame)
        np.testing.assert_array_equal(out[:, :18], 0.0)
        np.testing.assert_array_equal(out[:, 18:], 1.0)

    def test_checkerboard_aliases_to_sampling_rule(self):
        frame = np.indices((180, 240)).sum(axis=0) % 2
        out = aps_resize(frame.astype(float))
        # independent recomputation of the round-half-down sampling grid
        cols = np.clip(np.ceil(np.arange(36) * (240 / 36) - 0.5), 0, 239).astype(int)
        rows = np.clip(np.ceil(np.arange(36) * (180 / 36) - 0.5), 0, 179).astype(int)
        expect = (rows[:, None] + cols[None, :]) % 2
        np.testing.assert_array_equal(out, expect)

    def test_wrong_extent(self):
        with pytest.raises(ValueError):
            aps_resize(np.zeros((36, 36)))


class TestApsNormalize:
    def test_identity_when_already_unit_range(self, rng):
        f = rng.random((36, 36))
        f[0, 0], f[1, 1] = 0.0, 1.0
        np.testing.assert_allclose(aps_normalize(f).values, f, atol=1e-7)

    def test_constant_maps_to_half(self):
        np.testing.assert_array_equal(aps_normalize(np.full((36, 36), 7.0)).values, 0.5)

    def test_three_level_affine(self):
        f = np.tile(np.array([10.0, 20.0, 30.0] * 12), (36, 1))
        out = aps_normalize(f).values
        np.testing.assert_allclose(out, np.tile([0.0, 0.5, 1.0], (36, 12)))

    def test_attains_both_extremes_when_nonconstant(self, rng):
        f = rng.random((36, 36)) * 0.2 + 0.4
        out = aps_normalize(f).values
        assert out.min() == 0.0 and out.max() == 1.0


class TestExposureAugment:
    def test_zero_shift_identity(self, rng):
        raw = rng.random((36, 36))
        np.testing.assert_array_equal(exposure_augment(raw, 0.0), raw)

    def test_full_range_shift_saturates(self, rng):
        raw = rng.random((36, 36))
        np.testing.assert_array_equal(exposure_augment(raw, 1.0), 1.0)

    def test_quarter_shift_on_ramp(self):
        ramp = np.linspace(0, 1, 36)[None, :].repeat(36, axis=0)
        up = exposure_augment(ramp, 0.25)
        np.testing.assert_allclose(up, np.clip(ramp + 0.25, 0, 1))
        down = exposure_augment(ramp, -0.25)
        np.testing.assert_allclose(down, np.clip(ramp - 0.25, 0, 1))


class TestLabeling:
    @pytest.mark.parametrize("x,expect", [
        (0, Decision.L), (5, Decision.L), (11, Decision.L),
        (12, Decision.C), (23, Decision.C),
        (24, Decision.R), (35, Decision.R),
    ])
    def test_thirds(self, x, expect):
        assert label_from_target(x) is expect

    def test_absent_is_nonvisible(self):
        assert label_from_target(None) is Decision.N

    @pytest.mark.parametrize("bad", [-1, 36, 100])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            label_from_target(bad)


def synthetic_recording(seed, duration_us=2_000_000, event_rate=300_000,
                        aps_fps=15):
    """A recording with steady random events and a drifting target label."""
    rng = np.random.default_rng(seed)
    n = int(event_rate * duration_us / 1e6)
    ts = np.sort(rng.integers(0, duration_us, n)).astype(np.uint32)
    ev = make_events(ts, rng.integers(0, 240, n), rng.integers(0, 180, n),
                     rng.integers(0, 2, n))
    n_aps = int(duration_us / 1e6 * aps_fps)
    aps_t = (np.arange(1, n_aps + 1) * (1e6 / aps_fps)).astype(np.uint32)
    aps_raw = rng.random((n_aps, 36, 36)).astype(np.float32)
    label_t = np.arange(0, duration_us, 5000).astype(np.uint32)
    label_x = ((label_t // 50_000) % 37).astype(np.int16) - 1  # sweeps N,0..35
    return Recording(events=ev, aps_t=aps_t, aps_raw=aps_raw,
                     label_t=label_t, label_x=label_x)


class TestAssembleDataset:
    def test_hundred_frame_recording_splits_80_20(self):
        rec = synthetic_recording(0)
        stream = frames.frames_from_recording(rec)
        train, test, report = assemble_dataset([rec])
        n = len(stream)
        assert report["test_frames"] == n - int(0.8 * n)
        # no training frame is later than any test frame of the same recording
        # (augmented copies excluded: they reuse training timestamps)

    def test_split_is_temporal(self):
        rec = synthetic_recording(1)
        stream = frames.frames_from_recording(rec)
        n_train = int(0.8 * len(stream))
        t_train_max = max(item[0] for item in stream[:n_train])
        t_test_min = min(item[0] for item in stream[n_train:])
        assert t_train_max <= t_test_min

    def test_source_mix_hits_45_55(self):
        recs = [synthetic_recording(s) for s in range(3)]
        train, _, report = assemble_dataset(recs)
        assert abs(report["train_aps_fraction"] - 0.45) <= 0.02

    def test_augmentation_preserves_labels(self):
        rec = synthetic_recording(2)
        train, _, report = assemble_dataset([rec])
        n_orig = report["train_aps_before_augment"] + report["train_dvs"]
        aug_labels = train.labels[n_orig:]
        aug_x = train.target_x[n_orig:]
        for lab, x in zip(aug_labels, aug_x):
            expect = Decision.N if x < 0 else label_from_target(int(x))
            assert Decision(lab) is expect

    def test_empty_recording_raises(self):
        rec = Recording(events=make_events([], [], [], []),
                        aps_t=np.zeros(0, dtype=np.uint32),
                        aps_raw=np.zeros((0, 36, 36), dtype=np.float32),
                        label_t=np.array([0], dtype=np.uint32),
                        label_x=np.array([-1], dtype=np.int16))
        with pytest.raises(ValueError):
            assemble_dataset([rec])

    def test_class_report_present(self):
        _, _, report = assemble_dataset([synthetic_recording(3)])
        assert set(report["train_class_mix"]) == {"L", "C", "R", "N"}
        assert report["reference_class_mix"]["N"] == 0.56


class TestFileFormats:
    def test_event_round_trip(self, rng, tmp_path):
        n = 1000
        ev = make_events(np.sort(rng.integers(0, 10_000, n)),
                         rng.integers(0, 240, n), rng.integers(0, 180, n),
                         rng.integers(0, 2, n))
        path = tmp_path / "r.events"
        write_events(path, ev)
        back = read_events(path)
        np.testing.assert_array_equal(ev, back)

    def test_truncated_event_file(self, tmp_path):
        path = tmp_path / "r.events"
        ev = make_events([1, 2], [3, 4], [5, 6], [1, 0])
        write_events(path, ev)
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(frames.FormatError):
            read_events(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "r.events"
        path.write_bytes(b"not an event file at all")
        with pytest.raises(frames.FormatError):
            read_events(path)

    def test_recording_round_trip(self, tmp_path):
        rec = synthetic_recording(4, duration_us=300_000)
        save_recording(tmp_path / "rec00", rec)
        back = load_recording(tmp_path / "rec00")
        np.testing.assert_array_equal(rec.events, back.events)
        np.testing.assert_array_equal(rec.aps_t, back.aps_t)
        np.testing.assert_allclose(rec.aps_raw, back.aps_raw)
        np.testing.assert_array_equal(rec.label_t, back.label_t)
        np.testing.assert_array_equal(rec.label_x, back.label_x)

    def test_dataset_round_trip(self, rng, tmp_path):
        ds = Dataset(frames=rng.random((10, 36, 36)).astype(np.float32),
                     labels=rng.integers(0, 4, 10).astype(np.uint8),
                     target_x=np.array([-1, 0, 5, 12, 23, 24, 35, -1, 7, 30],
                                       dtype=np.int16),
                     source=rng.integers(0, 2, 10).astype(np.uint8))
        path = tmp_path / "d.ds"
        save_dataset(path, ds)
        back = load_dataset(path)
        np.testing.assert_array_equal(ds.frames, back.frames)
        np.testing.assert_array_equal(ds.labels, back.labels)
        np.testing.assert_array_equal(ds.target_x, back.target_x)
        np.testing.assert_array_equal(ds.source, back.source)

    def test_dataset_truncation_detected(self, rng, tmp_path):
        ds = Dataset(frames=rng.random((3, 36, 36)).astype(np.float32),
                     labels=np.zeros(3, dtype=np.uint8),
                     target_x=np.full(3, -1, dtype=np.int16),
                     source=np.zeros(3, dtype=np.uint8))
        path = tmp_path / "d.ds"
        save_dataset(path, ds)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(frames.FormatError):
            load_dataset(path)


class TestNormalizedFrameInvariant:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_all_outputs_unit_range(self, seed):
        rng = np.random.default_rng(seed)
        aps = aps_normalize(rng.random((36, 36)) * 100 - 50)
        assert aps.values.min() >= 0.0 and aps.values.max() <= 1.0
        hist = np.full((36, 36), 0.5)
        hist.reshape(-1)[rng.choice(1296, 50, replace=False)] += rng.normal(0, 0.3, 50)
        dvs = dvs_normalize(hist)
        assert dvs.values.min() >= 0.0 and dvs.values.max() <= 1.0
