import numpy as np
import pytest

from bitquant.data import gen_synthetic
from bitquant.errors import ConfigError, TrainingDivergedError, UnsupportedSchemeError
from bitquant.model import (
    LayerSpec,
    build_model,
    load_dataset,
    parse_config,
    parse_data_config,
)
from bitquant.train import (
    Hyper,
    evaluate,
    post_training_quantize,
    predict_logits,
    train,
)


def mlp_specs(weight_bits=32, act_bits=32, scheme="scale-only"):
    return [
        LayerSpec(kind="linear", in_features=2, out_features=16,
                  weight_bits=weight_bits, act_bits=act_bits, scheme=scheme),
        LayerSpec(kind="relu"),
        LayerSpec(kind="linear", in_features=16, out_features=2,
                  weight_bits=weight_bits, act_bits=act_bits, scheme=scheme),
    ]


def valid_config():
    return {
        "seed": 3,
        "model": [
            {"kind": "linear", "in_features": 2, "out_features": 8,
             "weight_bits": 8, "act_bits": 8},
            {"kind": "relu"},
            {"kind": "linear", "in_features": 8, "out_features": 2},
        ],
        "quant": {"scheme": "scale-only", "ema_momentum": 0.9},
        "train": {"lr": 0.1, "epochs": 2, "batch": 32},
        "data": {"kind": "blobs", "n": 128},
    }


class TestConfig:
    def test_valid_document_parses(self):
        cfg = parse_config(valid_config())
        assert cfg.seed == 3
        assert len(cfg.layers) == 3
        assert cfg.train.batch == 32
        assert cfg.data.kind == "blobs"

    def test_unknown_top_level_key(self):
        doc = valid_config()
        doc["extra"] = 1
        with pytest.raises(ConfigError, match="extra"):
            parse_config(doc)

    def test_unknown_layer_key_names_path(self):
        doc = valid_config()
        doc["model"][1]["bogus"] = True
        with pytest.raises(ConfigError, match=r"model\[1\].*bogus"):
            parse_config(doc)

    def test_unknown_train_key(self):
        doc = valid_config()
        doc["train"]["momentum"] = 0.9
        with pytest.raises(ConfigError, match="train.*momentum"):
            parse_config(doc)

    def test_zero_weight_bits_rejected(self):
        doc = valid_config()
        doc["model"][0]["weight_bits"] = 0
        with pytest.raises(ConfigError, match="weight_bits"):
            parse_config(doc)

    def test_missing_required_key(self):
        doc = valid_config()
        del doc["train"]
        with pytest.raises(ConfigError, match="train"):
            parse_config(doc)

    def test_layer_scheme_defaults_to_quant_section(self):
        doc = valid_config()
        doc["quant"]["scheme"] = "symmetric"
        cfg = parse_config(doc)
        assert all(layer.scheme == "symmetric" for layer in cfg.layers)

    def test_layer_scheme_override_wins(self):
        doc = valid_config()
        doc["quant"]["scheme"] = "symmetric"
        doc["model"][0]["scheme"] = "affine"
        cfg = parse_config(doc)
        assert cfg.layers[0].scheme == "affine"
        assert cfg.layers[2].scheme == "symmetric"

    def test_data_config_idx_requires_paths(self):
        with pytest.raises(ConfigError, match="images"):
            parse_data_config({"kind": "idx"})

    def test_load_dataset_uses_default_seed(self):
        cfg = parse_data_config({"kind": "blobs", "n": 64})
        a = load_dataset(cfg, default_seed=5)
        b = load_dataset(cfg, default_seed=5)
        c = load_dataset(cfg, default_seed=6)
        assert np.array_equal(a.features, b.features)
        assert not np.array_equal(a.features, c.features)

    def test_load_dataset_idx(self, tmp_path):
        from test_data import write_idx_pair

        rng = np.random.default_rng(0)
        img, lbl = write_idx_pair(
            tmp_path,
            rng.integers(0, 256, size=(6, 4, 4), dtype=np.uint8),
            rng.integers(0, 2, size=6, dtype=np.uint8),
        )
        cfg = parse_data_config({"kind": "idx", "images": img, "labels": lbl})
        ds = load_dataset(cfg, default_seed=0)
        assert ds.features.shape == (6, 1, 4, 4)


class TestBuildModel:
    def test_weight_shape_out_by_in(self):
        model = build_model([LayerSpec(kind="linear", in_features=4, out_features=3)], 0)
        assert model.weights[0].shape == (3, 4)

    def test_same_seed_identical_weights(self):
        specs = mlp_specs()
        a = build_model(specs, 42)
        b = build_model(specs, 42)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights) if x is not None)

    def test_different_seeds_differ(self):
        specs = mlp_specs()
        a = build_model(specs, 1)
        b = build_model(specs, 2)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_init_bound_matches_fan_in_out(self):
        model = build_model([LayerSpec(kind="linear", in_features=50, out_features=70)], 9)
        bound = np.sqrt(6.0 / 120.0)
        w = model.weights[0]
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.8 * bound  # actually fills the range


class TestTrain:
    def test_zero_epochs_reports_initial_metrics_only(self):
        ds = gen_synthetic("blobs", 64, 0)
        model = build_model(mlp_specs(), 0)
        report = train(model, ds, Hyper(lr=0.1, epochs=0, batch=16))
        assert len(report.epochs) == 1
        assert report.epochs[0].epoch == 0

    def test_deterministic_training(self):
        ds = gen_synthetic("blobs", 200, 1)
        a = build_model(mlp_specs(8, 8), 5)
        b = build_model(mlp_specs(8, 8), 5)
        ra = train(a, ds, Hyper(lr=0.1, epochs=3, batch=32))
        rb = train(b, ds, Hyper(lr=0.1, epochs=3, batch=32))
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights) if x is not None)
        assert [e.loss for e in ra.epochs] == [e.loss for e in rb.epochs]

    def test_final_report_entry_equals_evaluate(self):
        ds = gen_synthetic("blobs", 200, 2)
        model = build_model(mlp_specs(8, 8), 5)
        report = train(model, ds, Hyper(lr=0.1, epochs=2, batch=32))
        metrics = evaluate(model, ds, "fake-quant")
        assert report.final.accuracy == metrics.accuracy
        assert report.final.loss == metrics.loss

    def test_fp32_learns_xor(self):
        # nonlinear task: relu pairs can realize |x1+x2| - |x1-x2| without bias
        ds = gen_synthetic("xor", 1000, 0)
        specs = [
            LayerSpec(kind="linear", in_features=2, out_features=32),
            LayerSpec(kind="relu"),
            LayerSpec(kind="linear", in_features=32, out_features=2),
        ]
        model = build_model(specs, 0)
        report = train(model, ds, Hyper(lr=0.2, epochs=40, batch=32))
        assert report.final.accuracy > 0.97

    def test_loss_decreases_on_separable_data(self):
        ds = gen_synthetic("blobs", 400, 3)
        model = build_model(mlp_specs(), 3)
        report = train(model, ds, Hyper(lr=0.1, epochs=5, batch=32))
        assert report.final.loss < report.epochs[0].loss
        assert report.final.accuracy > 0.95

    def test_divergence_error_names_epoch(self):
        ds = gen_synthetic("blobs", 64, 4)
        model = build_model(mlp_specs(), 4)
        with pytest.raises(TrainingDivergedError, match="epoch 1"):
            train(model, ds, Hyper(lr=1e30, epochs=3, batch=16))

    def test_ema_state_created_during_training(self):
        ds = gen_synthetic("blobs", 64, 5)
        model = build_model(mlp_specs(8, 8), 5)
        assert model.act_params[0] is None
        train(model, ds, Hyper(lr=0.05, epochs=1, batch=16))
        assert model.act_params[0] is not None
        assert model.act_params[2] is not None

    def test_latent_weights_stay_off_grid(self):
        # quantization is forward-only: after training the latent weights
        # are generally not multiples of the per-channel step
        ds = gen_synthetic("blobs", 128, 6)
        model = build_model(mlp_specs(4, 8), 6)
        train(model, ds, Hyper(lr=0.1, epochs=2, batch=32))
        from bitquant.model import weight_quant_params
        from bitquant.quant import fake_quantize

        w = model.weights[0]
        on_grid = fake_quantize(w, weight_quant_params(model, 0))
        assert not np.array_equal(w, on_grid)


class TestEvaluate:
    def test_rejects_unknown_mode(self):
        ds = gen_synthetic("blobs", 32, 0)
        model = build_model(mlp_specs(), 0)
        with pytest.raises(ValueError, match="mode"):
            evaluate(model, ds, "quickly")

    def test_fp32_modes_agree_exactly(self):
        ds = gen_synthetic("blobs", 64, 1)
        model = build_model(mlp_specs(), 1)
        train(model, ds, Hyper(lr=0.1, epochs=1, batch=16))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.array_equal(fake, integer)

    def test_dual_path_close_for_int8_layers(self):
        ds = gen_synthetic("blobs", 256, 2)
        model = build_model(mlp_specs(8, 8), 2)
        train(model, ds, Hyper(lr=0.1, epochs=3, batch=32))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.allclose(fake, integer, rtol=1e-5, atol=1e-5)

    def test_binary_layers_bit_exact_when_inputs_binary(self):
        # binarized input keeps every intermediate an exact small integer,
        # so the xnor path and the FP32 fake path agree bit-for-bit
        specs = [
            LayerSpec(kind="linear", in_features=2, out_features=16,
                      weight_bits=1, act_bits=1),
            LayerSpec(kind="linear", in_features=16, out_features=2,
                      weight_bits=1, act_bits=1),
        ]
        ds = gen_synthetic("blobs", 128, 3)
        model = build_model(specs, 3)
        train(model, ds, Hyper(lr=0.05, epochs=2, batch=32))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.array_equal(fake, integer)

    def test_dual_path_symmetric_scheme(self):
        ds = gen_synthetic("blobs", 256, 9)
        model = build_model(mlp_specs(8, 8, scheme="symmetric"), 9)
        train(model, ds, Hyper(lr=0.1, epochs=3, batch=32))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.allclose(fake, integer, rtol=1e-4, atol=1e-4)

    def test_integer_mode_rejects_affine(self):
        ds = gen_synthetic("blobs", 64, 4)
        model = build_model(mlp_specs(8, 8, scheme="affine"), 4)
        train(model, ds, Hyper(lr=0.05, epochs=1, batch=16))
        with pytest.raises(UnsupportedSchemeError, match="affine"):
            evaluate(model, ds, "integer-kernel")

    def test_integer_mode_rejects_mixed_binary(self):
        specs = [LayerSpec(kind="linear", in_features=2, out_features=4,
                           weight_bits=1, act_bits=8)]
        ds = gen_synthetic("blobs", 32, 5)
        model = build_model(specs, 5)
        train(model, ds, Hyper(lr=0.05, epochs=1, batch=16))
        with pytest.raises(UnsupportedSchemeError, match="W1"):
            evaluate(model, ds, "integer-kernel")

    def test_integer_mode_needs_calibration(self):
        model = build_model(mlp_specs(8, 8), 6)
        ds = gen_synthetic("blobs", 32, 6)
        with pytest.raises(ValueError, match="calibrated"):
            evaluate(model, ds, "integer-kernel")


class TestConvModel:
    def conv_specs(self, weight_bits=32, act_bits=32, padding=0):
        return [
            LayerSpec(kind="conv2d", in_channels=1, out_channels=4, kh=3, kw=3,
                      stride=1, padding=padding,
                      weight_bits=weight_bits, act_bits=act_bits),
            LayerSpec(kind="relu"),
            LayerSpec(kind="linear", in_features=4 * 6 * 6 if padding == 0 else 4 * 8 * 8,
                      out_features=2, weight_bits=weight_bits, act_bits=act_bits),
        ]

    def image_dataset(self, n=48, seed=0):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n)
        images = rng.normal(0, 0.4, size=(n, 1, 8, 8)).astype(np.float32)
        images[labels == 1, :, 2:6, 2:6] += 1.0
        from bitquant.data import Dataset

        return Dataset(images.astype(np.float32), labels.astype(np.int64))

    def test_conv_model_trains(self):
        ds = self.image_dataset()
        model = build_model(self.conv_specs(), 0)
        report = train(model, ds, Hyper(lr=0.05, epochs=4, batch=16))
        assert report.final.accuracy > 0.8

    def test_conv_dual_path_int8(self):
        ds = self.image_dataset(seed=1)
        model = build_model(self.conv_specs(8, 8), 1)
        train(model, ds, Hyper(lr=0.05, epochs=2, batch=16))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.allclose(fake, integer, rtol=1e-4, atol=1e-4)

    def test_conv_dual_path_int8_with_padding(self):
        ds = self.image_dataset(seed=5)
        specs = self.conv_specs(8, 8, padding=1)
        model = build_model(specs, 5)
        train(model, ds, Hyper(lr=0.05, epochs=2, batch=16))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.allclose(fake, integer, rtol=1e-4, atol=1e-4)

    def test_padded_int8_conv_requires_zero_in_range(self):
        ds = self.image_dataset(seed=6)
        specs = self.conv_specs(8, 8, padding=1)
        model = build_model(specs, 6)
        train(model, ds, Hyper(lr=0.05, epochs=1, batch=16))
        # force a calibrated range that excludes zero
        from bitquant.quant import QuantParams

        model.act_params[0] = QuantParams(bits=8, lower=0.5, upper=3.0)
        with pytest.raises(UnsupportedSchemeError, match="containing 0"):
            predict_logits(model, ds.features, "integer-kernel")

    def test_binary_conv_int_path_requires_zero_padding(self):
        ds = self.image_dataset(seed=2)
        specs = self.conv_specs(1, 1, padding=1)
        model = build_model(specs, 2)
        train(model, ds, Hyper(lr=0.05, epochs=1, batch=16))
        with pytest.raises(ValueError, match="padding"):
            predict_logits(model, ds.features, "integer-kernel")

    def test_binary_conv_dual_path_no_padding(self):
        ds = self.image_dataset(seed=3)
        model = build_model(self.conv_specs(1, 1), 3)
        train(model, ds, Hyper(lr=0.05, epochs=1, batch=16))
        fake = predict_logits(model, ds.features, "fake-quant")
        integer = predict_logits(model, ds.features, "integer-kernel")
        assert np.array_equal(fake, integer)


class TestPostTrainingQuantize:
    def trained_fp32(self, seed=0):
        ds = gen_synthetic("blobs", 256, seed)
        model = build_model(mlp_specs(), seed)
        train(model, ds, Hyper(lr=0.1, epochs=5, batch=32))
        return model, ds

    def test_bits_32_is_identity(self):
        model, ds = self.trained_fp32()
        same = post_training_quantize(model, ds, bits=32)
        assert all(
            np.array_equal(a, b)
            for a, b in zip(model.weights, same.weights)
            if a is not None
        )
        assert [s.weight_bits for s in same.specs] == [s.weight_bits for s in model.specs]

    def test_quantized_model_close_to_fp32(self):
        model, ds = self.trained_fp32(1)
        q = post_training_quantize(model, ds, bits=8)
        base = evaluate(model, ds).accuracy
        quantized = evaluate(q, ds).accuracy
        assert abs(base - quantized) <= 0.01

    def test_sets_frozen_params(self):
        model, ds = self.trained_fp32(2)
        q = post_training_quantize(model, ds, bits=8)
        assert q.weight_params[0] is not None and q.weight_params[0].axis == 0
        assert q.act_params[0] is not None and q.act_params[0].axis is None
        assert q.specs[0].weight_bits == 8 and q.specs[0].act_bits == 8
        # source model untouched
        assert model.weight_params[0] is None

    def test_rejects_quantized_input_model(self):
        ds = gen_synthetic("blobs", 64, 3)
        model = build_model(mlp_specs(8, 8), 3)
        with pytest.raises(ValueError, match="FP32"):
            post_training_quantize(model, ds, bits=8)

    def test_rejects_empty_calibration(self):
        model, ds = self.trained_fp32(4)
        import dataclasses

        with pytest.raises(ValueError):
            empty = dataclasses.replace(ds)  # Dataset validates N >= 1 itself
            empty.features = ds.features[:0]
            post_training_quantize(model, empty, bits=8)

    def test_binarizing_ptq(self):
        model, ds = self.trained_fp32(5)
        q = post_training_quantize(model, ds, bits=1)
        assert q.specs[0].weight_bits == 1
        metrics = evaluate(q, ds)  # runs without calibrated ranges
        assert metrics.n == len(ds)
