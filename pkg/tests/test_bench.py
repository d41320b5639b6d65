import csv
import io
import json

import pytest

from bitquant import bench
from bitquant.bench import (
    CSV_HEADER,
    bench_gemm,
    bench_to_csv,
    bench_to_json,
    size_report,
    size_to_csv,
    size_to_json,
)
from bitquant.checkpoint import save_checkpoint
from bitquant.errors import BenchError
from bitquant.model import LayerSpec, build_model


class TestBenchGemm:
    def test_fp32_only_speedup_is_one(self):
        reports = bench_gemm((64, 64, 64), reps=5, kernels=("fp32",))
        assert len(reports) == 1
        assert reports[0].speedup_vs_fp32 == 1.0

    def test_reps_below_five_rejected(self):
        with pytest.raises(ValueError, match="reps"):
            bench_gemm((64, 64, 64), reps=1)

    def test_small_sizes_rejected(self):
        with pytest.raises(ValueError, match="64"):
            bench_gemm((32, 64, 64), reps=5)

    def test_unknown_kernel_rejected(self):
        with pytest.raises(ValueError, match="kernels"):
            bench_gemm((64, 64, 64), reps=5, kernels=("fp32", "int4"))

    def test_all_kernels_report_in_order(self):
        reports = bench_gemm((64, 64, 64), reps=5, seed=1)
        assert [r.op for r in reports] == ["fp32", "int8", "xnor"]
        for r in reports:
            assert r.reps == 5 and len(r.times) == 5
            assert r.median_s > 0 and r.gops > 0
            assert r.speedup_vs_fp32 is not None

    def test_without_fp32_speedup_is_none(self):
        reports = bench_gemm((64, 64, 64), reps=5, kernels=("xnor",))
        assert reports[0].speedup_vs_fp32 is None

    def test_cross_check_failure_aborts(self, monkeypatch):
        def corrupt(a, b):
            out = bench.stepwise_matmul_f32(a, b)
            out[0, 0] += 1.0
            return out

        monkeypatch.setattr(bench.tensor, "matmul", corrupt)
        with pytest.raises(BenchError, match="fp32"):
            bench_gemm((64, 64, 64), reps=5)

    def test_csv_shape(self):
        reports = bench_gemm((64, 64, 64), reps=5)
        text = bench_to_csv(reports)
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == CSV_HEADER.split(",")
        assert len(rows) == 4
        for row in rows[1:]:
            assert len(row) == 9
            assert float(row[6]) > 0  # median_s parses

    def test_json_mirrors_csv_fields(self):
        reports = bench_gemm((64, 64, 64), reps=5)
        docs = json.loads(bench_to_json(reports))
        assert {d["op"] for d in docs} == {"fp32", "int8", "xnor"}
        assert set(docs[0]) == set(CSV_HEADER.split(","))

    def test_threads_recorded(self):
        reports = bench_gemm((64, 64, 64), reps=5, threads=3)
        assert all(r.threads == 3 for r in reports)


class TestSizeReport:
    def checkpoint_with(self, tmp_path, bits, in_features=1024, out_features=1024):
        specs = [LayerSpec(kind="linear", in_features=in_features,
                           out_features=out_features, weight_bits=bits,
                           act_bits=32 if bits == 32 else 8)]
        model = build_model(specs, 0)
        if bits not in (1, 32):
            from bitquant.model import weight_quant_params

            model.weight_params[0] = weight_quant_params(model, 0)
        path = str(tmp_path / f"m{bits}.bq")
        save_checkpoint(model, path)
        return path

    def test_one_bit_compression_near_32(self, tmp_path):
        report = size_report(self.checkpoint_with(tmp_path, 1))
        comp = report.rows[0].compression_vs_fp32
        assert 31.5 <= comp <= 32.0

    def test_eight_bit_compression_exactly_4(self, tmp_path):
        report = size_report(self.checkpoint_with(tmp_path, 8))
        assert report.rows[0].compression_vs_fp32 == 4.0

    def test_fp32_compression_exactly_1(self, tmp_path):
        report = size_report(self.checkpoint_with(tmp_path, 32))
        assert report.rows[0].compression_vs_fp32 == 1.0

    def test_manifest_overhead_reported_separately(self, tmp_path):
        path = self.checkpoint_with(tmp_path, 8, 64, 64)
        report = size_report(path)
        assert report.manifest_bytes > 13
        assert report.total_bytes == 64 * 64  # weights only

    def test_csv_render(self, tmp_path):
        path = self.checkpoint_with(tmp_path, 8, 64, 32)
        text = size_to_csv(size_report(path))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["layer", "bits", "bytes", "compression_vs_fp32"]
        assert rows[1][0] == "0:linear" and rows[1][1] == "8"
        assert rows[-2][0] == "total"
        assert rows[-1][0] == "manifest"

    def test_json_render(self, tmp_path):
        path = self.checkpoint_with(tmp_path, 8, 64, 32)
        doc = json.loads(size_to_json(size_report(path)))
        assert doc["layers"][0]["compression_vs_fp32"] == 4.0
        assert doc["total"]["bytes"] == 64 * 32
        assert doc["manifest_bytes"] > 0

    def test_weightless_checkpoint_renders(self, tmp_path):
        model = build_model([LayerSpec(kind="relu")], 0)
        path = str(tmp_path / "relu.bq")
        save_checkpoint(model, path)
        report = size_report(path)
        assert report.rows == ()
        size_to_csv(report)
        size_to_json(report)
