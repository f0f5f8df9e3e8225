import numpy as np
import pytest
import torch
import torch.nn.functional as F

from picktrace import errors
from picktrace.annotate import LabelSequence
from picktrace.evaluate import confusion, precision_recall_f1
from picktrace.ingest import PICK
from picktrace.model import (
    ModelConfig,
    TrainConfig,
    WindowBatch,
    build_model,
    classify_session,
    feature_channels,
    forward,
    load_model,
    loocv,
    normalize_feature_set,
    save_model,
    session_features,
    train,
)

MINI = ModelConfig(
    in_channels=2,
    seq_len=384,
    encoder_channels=(8, 16, 32, 64, 128),
    bilstm_units=(32, 16),
    lstm_units=8,
    head_hidden_channels=8,
    strict=False,
)


def random_batch(rng, n=2, seq_len=384, channels=4):
    return WindowBatch(
        data=rng.normal(size=(n, seq_len, channels)).astype(np.float32),
        alignment=[("x_1", i * seq_len, seq_len) for i in range(n)],
    )


class TestFeatureSets:
    def test_aliases_and_separators(self):
        assert normalize_feature_set("all") == "mass+accel+velocity"
        assert normalize_feature_set("mass,accel") == "mass+accel"
        assert normalize_feature_set("accel+mass") == "mass+accel"
        assert normalize_feature_set("MASS") == "mass"

    def test_channel_counts(self):
        assert len(feature_channels("velocity")) == 1
        assert len(feature_channels("accel")) == 3
        assert len(feature_channels("mass")) == 1
        assert len(feature_channels("mass+accel")) == 4
        assert len(feature_channels("all")) == 5

    def test_unknown_rejected(self):
        with pytest.raises(errors.ConfigInvalid):
            normalize_feature_set("gyro")
        with pytest.raises(errors.ConfigInvalid):
            normalize_feature_set("mass+velocity")


class TestModelConfig:
    def test_default_valid(self):
        ModelConfig().validate()

    def test_seq_len_must_be_multiple_of_384(self):
        with pytest.raises(errors.ConfigInvalid):
            build_model(ModelConfig(seq_len=400))

    def test_strict_pins_reference_widths(self):
        with pytest.raises(errors.ConfigInvalid):
            ModelConfig(encoder_channels=(16, 32, 64, 128, 512)).validate()
        ModelConfig(encoder_channels=(8, 32, 64, 128, 256)).validate()  # c1 is free

    def test_mini_config_allowed_when_not_strict(self):
        MINI.validate()

    def test_deepest_feature_length(self):
        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        x = torch.zeros(1, 1, 384)
        h = x
        for enc in m.net.encoders:
            h = enc(h)
        assert h.shape[-1] == 1

    def test_parameter_count_seed_independent(self):
        a = build_model(ModelConfig(), seed=0)
        b = build_model(ModelConfig(), seed=12345)
        assert a.parameter_count == b.parameter_count


class TestForward:
    @pytest.mark.parametrize("seq_len", [384, 768, 1152])
    def test_length_preserved_and_probabilities_sum(self, seq_len):
        m = build_model(ModelConfig(in_channels=4, seq_len=seq_len), seed=0)
        batch = random_batch(np.random.default_rng(0), n=2, seq_len=seq_len)
        probs = forward(m, batch)
        assert probs.shape == (2, seq_len, 2)
        assert np.all(np.abs(probs.sum(axis=2) - 1.0) < 1e-5)
        assert np.all(probs >= 0)

    def test_deterministic_given_seed(self):
        batch = random_batch(np.random.default_rng(1))
        outs = []
        for _ in range(2):
            m = build_model(ModelConfig(in_channels=4), seed=7)
            outs.append(forward(m, WindowBatch(batch.data[:, :384], batch.alignment)))
        assert np.array_equal(outs[0], outs[1])

    def test_duplicated_window_gets_identical_output(self):
        m = build_model(ModelConfig(in_channels=4, seq_len=384), seed=0)
        one = random_batch(np.random.default_rng(2), n=1)
        two = WindowBatch(
            data=np.concatenate([one.data, one.data]),
            alignment=one.alignment * 2,
        )
        probs = forward(m, two)
        assert np.array_equal(probs[0], probs[1])

    def test_channel_mismatch(self):
        m = build_model(ModelConfig(in_channels=4), seed=0)
        with pytest.raises(errors.ShapeMismatch):
            forward(m, random_batch(np.random.default_rng(0), channels=3))

    def test_bad_batches_rejected(self):
        with pytest.raises(errors.ShapeMismatch):
            WindowBatch(data=np.zeros((1, 100, 2)), alignment=[("a", 0, 100)])
        bad = np.zeros((1, 384, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(errors.ShapeMismatch):
            WindowBatch(data=bad, alignment=[("a", 0, 384)])


class TestGradientCheck:
    def test_analytic_matches_finite_differences(self):
        m = build_model(MINI, seed=0)
        net = m.net.double()
        net.train()
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.normal(size=(2, MINI.in_channels, MINI.seq_len)))
        y = torch.tensor(rng.integers(0, 2, size=(2, MINI.seq_len)))
        mask = torch.ones(2, MINI.seq_len, dtype=torch.bool)
        mask[1, 300:] = False

        def loss_fn():
            per = F.cross_entropy(net(x), y, reduction="none")
            return (per * mask).sum() / mask.sum()

        loss = loss_fn()
        net.zero_grad()
        loss.backward()

        params = [p for p in net.parameters() if p.grad is not None]
        picker = np.random.default_rng(1)
        checked = 0
        while checked < 32:
            p = params[int(picker.integers(len(params)))]
            idx = np.unravel_index(int(picker.integers(p.numel())), p.shape)
            analytic = float(p.grad[idx])
            original = float(p.data[idx])
            h = 1e-5 * max(1.0, abs(original))
            with torch.no_grad():
                p.data[idx] = original + h
                up = float(loss_fn())
                p.data[idx] = original - h
                down = float(loss_fn())
                p.data[idx] = original
            fd = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(fd))
            if scale < 1e-7:
                assert abs(analytic - fd) < 1e-8
            else:
                assert abs(analytic - fd) / scale <= 1e-3
            checked += 1


class TestTrain:
    def test_loss_decreases(self, tiny_day):
        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        _, history = train(m, tiny_day.sessions, TrainConfig(feature_set="mass", epochs=5, seed=0))
        assert history[4].train_loss < history[0].train_loss

    def test_feature_channel_mismatch_rejected(self, tiny_day):
        m = build_model(ModelConfig(in_channels=4), seed=0)
        with pytest.raises(errors.ConfigInvalid):
            train(m, tiny_day.sessions, TrainConfig(feature_set="mass", epochs=1))

    def test_unlabeled_sessions_rejected(self):
        from conftest import make_session

        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        with pytest.raises(errors.NoLabeledData):
            train(m, [make_session(n=800)], TrainConfig(feature_set="mass", epochs=1))

    def test_insufficient_windows(self):
        from conftest import make_session

        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        with pytest.raises(errors.InsufficientWindows):
            train(m, [make_session(n=100, labeled=True)], TrainConfig(feature_set="mass", epochs=1))

    def test_normalization_idempotent_on_training_set(self, tiny_day):
        m = build_model(ModelConfig(in_channels=4, seq_len=384), seed=0)
        tc = TrainConfig(feature_set="mass+accel", epochs=1, seed=0)
        trained, _ = train(m, tiny_day.sessions, tc)

        feats = np.concatenate(
            [session_features(s, "mass+accel") for s in tiny_day.sessions], axis=0
        )
        # reconstruct the training windows exactly as train() does
        seq_len = 384
        n_windows = int(np.ceil(len(feats) / seq_len))
        rng = np.random.default_rng(tc.seed)
        perm = rng.permutation(n_windows)
        n_val = max(1, int(round(tc.val_fraction * n_windows)))
        rows = []
        for k in perm[n_val:]:
            rows.append(feats[k * seq_len : (k + 1) * seq_len])
        train_rows = np.concatenate(rows, axis=0)
        normalized = trained.norm_stats.apply(train_rows)
        assert np.all(np.abs(normalized.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(normalized.std(axis=0) - 1.0) < 1e-6)

    def test_training_is_seed_deterministic(self, tiny_day):
        params = []
        for _ in range(2):
            m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=5)
            trained, _ = train(m, tiny_day.sessions, TrainConfig(feature_set="mass", epochs=2, seed=5))
            params.append({k: v.clone() for k, v in trained.net.state_dict().items()})
        assert all(torch.equal(params[0][k], params[1][k]) for k in params[0])

    def test_keeps_input_model_untouched(self, tiny_day):
        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        before = {k: v.clone() for k, v in m.net.state_dict().items()}
        train(m, tiny_day.sessions, TrainConfig(feature_set="mass", epochs=1, seed=0))
        assert all(torch.equal(before[k], v) for k, v in m.net.state_dict().items())
        assert m.norm_stats is None


@pytest.fixture(scope="module")
def trained(tiny_day):
    m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
    model, _ = train(m, tiny_day.sessions, TrainConfig(feature_set="mass", epochs=12, seed=0))
    return model


class TestClassify:
    def test_short_session_padded_once(self, trained, tiny_day):
        import copy

        session = copy.deepcopy(tiny_day.sessions[0])
        n = 200  # shorter than seq_len
        for name in ("gps_tow", "easting", "northing", "ax", "ay", "az", "raw_mass", "activity"):
            setattr(session, name, getattr(session, name)[:n])
        labels, probs = classify_session(trained, session)
        assert len(labels) == n
        assert len(probs) == n

    def test_exact_multiple_no_padding(self, trained, tiny_day):
        import copy

        session = copy.deepcopy(tiny_day.sessions[0])
        n = 2 * 384
        for name in ("gps_tow", "easting", "northing", "ax", "ay", "az", "raw_mass", "activity"):
            setattr(session, name, getattr(session, name)[:n])
        labels, probs = classify_session(trained, session)
        assert len(labels) == n

    def test_untrained_model_rejected(self, tiny_day):
        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        with pytest.raises(errors.FeatureMismatch):
            classify_session(m, tiny_day.sessions[0])

    def test_overlap_stitching_agrees_mostly(self, trained, tiny_day):
        session = tiny_day.sessions[0]
        plain, _ = classify_session(trained, session)
        voted, _ = classify_session(trained, session, overlap=True)
        assert np.mean(plain.labels == voted.labels) > 0.98

    def test_probabilities_match_labels(self, trained, tiny_day):
        session = tiny_day.sessions[0]
        labels, pick_prob = classify_session(trained, session)
        assert np.array_equal(labels.labels == PICK, pick_prob >= 0.5)


class TestPersistence:
    def test_round_trip(self, tmp_path, tiny_day):
        m = build_model(ModelConfig(in_channels=1, seq_len=384), seed=0)
        trained, _ = train(m, tiny_day.sessions, TrainConfig(feature_set="mass", epochs=2, seed=0))
        path = tmp_path / "model.pt"
        save_model(trained, path)
        loaded = load_model(path)
        assert loaded.config == trained.config
        assert loaded.feature_set == trained.feature_set
        assert np.array_equal(loaded.norm_stats.mean, trained.norm_stats.mean)
        session = tiny_day.sessions[0]
        a, _ = classify_session(trained, session)
        b, _ = classify_session(loaded, session)
        assert np.array_equal(a.labels, b.labels)

    def test_version_check(self, tmp_path):
        torch.save({"format_version": 99}, tmp_path / "bad.pt")
        with pytest.raises(errors.ConfigInvalid):
            load_model(tmp_path / "bad.pt")


class TestLoocv:
    def test_two_folds_and_averaging(self, small_season):
        sessions = [s for d in small_season for s in d.sessions]
        dates = sorted({s.harvest_date for s in sessions})[:2]
        res = loocv(
            sessions, dates,
            ModelConfig(in_channels=1, seq_len=384),
            TrainConfig(feature_set="mass", epochs=4, seed=0),
        )
        assert len(res.folds) == 2
        for fold in res.folds:
            for value in (fold.scores.precision, fold.scores.recall, fold.scores.f1):
                assert 0.0 <= value <= 1.0
        assert res.macro.f1 == pytest.approx(np.mean([f.scores.f1 for f in res.folds]))
        assert res.macro.precision == pytest.approx(
            np.mean([f.scores.precision for f in res.folds])
        )

    def test_unknown_date(self, small_season):
        sessions = [s for d in small_season for s in d.sessions]
        with pytest.raises(errors.UnknownDate):
            loocv(
                sessions, ["9-9-99"],
                ModelConfig(in_channels=1, seq_len=384),
                TrainConfig(feature_set="mass", epochs=1),
            )

    def test_single_date_rejected(self, tiny_day):
        with pytest.raises(errors.ConfigInvalid):
            loocv(
                tiny_day.sessions, [tiny_day.truth.harvest_date],
                ModelConfig(in_channels=1, seq_len=384),
                TrainConfig(feature_set="mass", epochs=1),
            )


class TestEndToEnd:
    def test_small_benchmark_f1(self, small_season):
        # train on two days, test on the third
        sessions = [s for d in small_season for s in d.sessions]
        test_date = small_season[-1].truth.harvest_date
        train_sessions = [s for s in sessions if s.harvest_date != test_date]
        test_sessions = [s for s in sessions if s.harvest_date == test_date]

        m = build_model(ModelConfig(in_channels=4, seq_len=384), seed=1)
        trained, _ = train(
            m, train_sessions, TrainConfig(feature_set="mass+accel", epochs=20, seed=1)
        )
        pooled = None
        for s in test_sessions:
            pred, _ = classify_session(trained, s)
            c = confusion(pred, LabelSequence(s.session_id, s.activity))
            pooled = c if pooled is None else pooled + c
        scores = precision_recall_f1(pooled)
        assert scores.f1 >= 0.95
