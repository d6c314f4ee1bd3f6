import csv
import json

import pytest

from kvsim.cli import main
from kvsim.geometry import (
    PRESETS,
    allocation_bandwidth,
    block_size_tokens,
    load_geometry,
    sliced_block_size_tokens,
)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def short_trace(tmp_path):
    path = tmp_path / "trace.csv"
    assert main([
        "trace-gen", "--qps", "20", "--count", "10", "--prompt-dist", "uniform:20:200",
        "--decode-dist", "uniform:1:30", "--seed", "3", "--out", str(path),
    ]) == 0
    return path


class TestAnalyze:
    def test_tables_round_trip(self, tmp_path, capsys):
        assert main(["analyze", "--model", "yi-6b", "--out", str(tmp_path)]) == 0
        for row in read_csv(tmp_path / "block_size.csv"):
            g = PRESETS["yi-6b"].with_tp(int(row["tp"]))
            size = int(row["page_group_bytes"])
            assert int(row["block_tokens"]) == block_size_tokens(g, size)
            if row["sliced_block_tokens"]:
                assert int(row["sliced_block_tokens"]) == sliced_block_size_tokens(g, size)
        for row in read_csv(tmp_path / "bandwidth.csv"):
            expect = allocation_bandwidth(
                int(row["page_group_bytes"]), int(row["tp"]), float(row["map_latency_us"])
            )
            assert float(row["bandwidth_bytes_per_s"]) == pytest.approx(expect, abs=0.5)
        out = capsys.readouterr().out
        assert "2048" in out and "block size" in out

    def test_reservation_worked_example(self, tmp_path):
        assert main(["analyze", "--model", "yi-34b", "--out", str(tmp_path)]) == 0
        rows = {row["tp"]: row for row in read_csv(tmp_path / "reservation.csv")}
        assert int(rows["2"]["buffer_count"]) == 120
        assert int(rows["2"]["buffer_bytes"]) == 102_400_000_000
        assert int(rows["2"]["total_bytes"]) == 12_288_000_000_000
        assert int(rows["2"]["per_request_buffer_bytes"]) == 204_800_000

    def test_unknown_model_usage_error(self, capsys):
        assert main(["analyze", "--model", "gpt-9"]) == 1
        assert "error" in capsys.readouterr().err


class TestTraceGen:
    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["trace-gen", "--qps", "0.5", "--count", "64", "--seed", "7"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_dist_usage_error(self, tmp_path, capsys):
        rc = main(["trace-gen", "--qps", "1", "--count", "4",
                   "--prompt-dist", "zipf:2", "--out", str(tmp_path / "t.csv")])
        assert rc == 1
        assert "distribution" in capsys.readouterr().err


class TestSimulate:
    def test_outputs_and_determinism(self, tmp_path, short_trace):
        args = [
            "simulate", "--model", "yi-6b", "--max-batch", "8", "--pool-gb", "1",
            "--trace", str(short_trace), "--mode", "overlapped",
        ]
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        assert (out_a / "iterations.csv").read_bytes() == (out_b / "iterations.csv").read_bytes()
        assert (out_a / "summary.json").read_bytes() == (out_b / "summary.json").read_bytes()
        summary = json.loads((out_a / "summary.json").read_text())
        assert summary["completed_requests"] == 10
        assert summary["config"]["allocator"] == "vattention"

    def test_empty_trace_valid_outputs(self, tmp_path):
        trace = tmp_path / "empty.csv"
        trace.write_text("arrival_ms,prompt_tokens,decode_tokens\n")
        out = tmp_path / "out"
        assert main(["simulate", "--model", "yi-6b", "--trace", str(trace),
                     "--out", str(out)]) == 0
        assert json.loads((out / "summary.json").read_text())["iterations"] == 0

    def test_malformed_trace_names_line(self, tmp_path, capsys):
        trace = tmp_path / "bad.csv"
        trace.write_text("arrival_ms,prompt_tokens,decode_tokens\n0,5,5\n1,x,2\n")
        rc = main(["simulate", "--model", "yi-6b", "--trace", str(trace),
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "line 3" in capsys.readouterr().err

    def test_aborted_simulation_exit_2(self, tmp_path, capsys):
        trace = tmp_path / "t.csv"
        trace.write_text("arrival_ms,prompt_tokens,decode_tokens\n0,4000,50\n")
        rc = main(["simulate", "--model", "yi-6b", "--max-batch", "4",
                   "--pool-gb", "0.01", "--trace", str(trace),
                   "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "aborted" in capsys.readouterr().err

    def test_usage_error_on_bad_flag(self, capsys):
        assert main(["simulate", "--model", "yi-6b"]) == 1  # missing --trace


class TestCompare:
    def test_page_group_sweep_table(self, tmp_path, short_trace, capsys):
        out = tmp_path / "cmp"
        rc = main([
            "compare", "--model", "yi-6b", "--max-batch", "8", "--pool-gb", "1",
            "--trace", str(short_trace), "--allocators", "vattention",
            "--page-groups", "64K,2M", "--out", str(out),
        ])
        assert rc == 0
        rows = read_csv(out / "compare.csv")
        assert [r["page_group"] for r in rows] == ["64K", "2M"]
        by_pg = {r["page_group"]: int(r["max_batch"]) for r in rows}
        assert by_pg["64K"] >= by_pg["2M"]
        assert "WARNING" not in capsys.readouterr().out

    def test_static_waste_dwarfs_dynamic(self, tmp_path, short_trace):
        # static commits max_context (200K tokens, ~13 GB) per request, so it
        # needs the full-size pool that the dynamic allocators barely touch
        out = tmp_path / "cmp"
        rc = main([
            "compare", "--model", "yi-6b", "--max-batch", "8", "--pool-gb", "80",
            "--trace", str(short_trace), "--allocators", "static,vattention",
            "--page-groups", "64K", "--out", str(out),
        ])
        assert rc == 0
        rows = {r["allocator"]: r for r in read_csv(out / "compare.csv")}
        assert float(rows["static"]["mean_waste_bytes"]) > 10 * float(
            rows["vattention"]["mean_waste_bytes"]
        )

    def test_identical_configs_identical_columns(self, tmp_path, short_trace):
        out = tmp_path / "cmp"
        rc = main([
            "compare", "--model", "yi-6b", "--max-batch", "8", "--pool-gb", "1",
            "--trace", str(short_trace), "--allocators", "vattention,vattention",
            "--page-groups", "64K", "--out", str(out),
        ])
        assert rc == 0
        rows = read_csv(out / "compare.csv")
        assert rows[0] == rows[1]

    def test_single_variant_usage_error(self, short_trace, capsys):
        rc = main(["compare", "--model", "yi-6b", "--trace", str(short_trace),
                   "--allocators", "vattention", "--page-groups", "64K"])
        assert rc == 1
        assert "two" in capsys.readouterr().err

    def test_unknown_allocator_usage_error(self, short_trace):
        rc = main(["compare", "--model", "yi-6b", "--trace", str(short_trace),
                   "--allocators", "vattention,heap", "--page-groups", "64K"])
        assert rc == 1


class TestModelFile:
    def test_geometry_from_json(self, tmp_path, short_trace):
        model = tmp_path / "tiny.json"
        model.write_text(json.dumps({
            "n_layers": 3, "kv_heads_total": 4, "head_dim": 128,
            "bytes_per_elem": 2, "max_context": 4096, "max_batch": 8,
        }))
        g = load_geometry(model, tp_degree=2)
        assert g.kv_heads_per_worker == 2
        out = tmp_path / "out"
        assert main(["simulate", "--model", str(model), "--pool-gb", "0.25",
                     "--trace", str(short_trace), "--out", str(out)]) == 0
