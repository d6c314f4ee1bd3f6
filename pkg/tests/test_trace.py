import pytest

from kvsim.trace import (
    SimTrace,
    TraceFormatError,
    TraceRecord,
    generate_trace,
    parse_length_dist,
)


class TestSimTrace:
    def test_round_trip(self, tmp_path):
        trace = SimTrace.from_rows([(0, 10, 5), (100, 20, 1), (100, 1, 1)])
        path = tmp_path / "t.csv"
        trace.to_csv(path)
        assert SimTrace.from_csv(path) == trace

    def test_rejects_decreasing_arrivals(self):
        with pytest.raises(TraceFormatError):
            SimTrace.from_rows([(100, 1, 1), (50, 1, 1)])

    def test_rejects_zero_tokens(self):
        with pytest.raises(TraceFormatError):
            SimTrace.from_rows([(0, 0, 1)])
        with pytest.raises(TraceFormatError):
            SimTrace.from_rows([(0, 1, 0)])

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("arrival_ms,prompt_tokens,decode_tokens\n0,10,5\n3,oops,1\n")
        with pytest.raises(TraceFormatError, match="line 3"):
            SimTrace.from_csv(path)

    def test_wrong_header_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(TraceFormatError, match="line 1"):
            SimTrace.from_csv(path)

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("arrival_ms,prompt_tokens,decode_tokens\n0,10\n")
        with pytest.raises(TraceFormatError, match="line 2"):
            SimTrace.from_csv(path)


class TestLengthDists:
    def test_fixed(self):
        import random

        sampler = parse_length_dist("fixed:512")
        assert sampler(random.Random(0)) == 512

    def test_uniform_bounds(self):
        import random

        sampler = parse_length_dist("uniform:10:20")
        rng = random.Random(1)
        draws = {sampler(rng) for _ in range(200)}
        assert min(draws) >= 10 and max(draws) <= 20

    def test_lognormal_floor(self):
        import random

        sampler = parse_length_dist("lognormal:0.0:0.5")
        rng = random.Random(2)
        assert all(sampler(rng) >= 1 for _ in range(100))

    @pytest.mark.parametrize("spec", ["fixed:0", "uniform:5:2", "uniform:0:4", "gauss:1:2", "fixed:x"])
    def test_invalid_specs(self, spec):
        with pytest.raises(ValueError):
            parse_length_dist(spec)


class TestGenerateTrace:
    def test_seed_determinism(self, tmp_path):
        a = generate_trace(64, qps=2.0, seed=0)
        b = generate_trace(64, qps=2.0, seed=0)
        assert a == b
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        a.to_csv(pa)
        b.to_csv(pb)
        assert pa.read_bytes() == pb.read_bytes()
        assert generate_trace(64, qps=2.0, seed=1) != a

    def test_mean_interarrival(self):
        trace = generate_trace(512, qps=0.25, seed=0)
        arrivals = [r.arrival_ms for r in trace]
        mean_gap = arrivals[-1] / (len(arrivals))
        assert mean_gap == pytest.approx(4000, rel=0.10)

    def test_fixed_dists_constant_rows(self):
        trace = generate_trace(16, qps=1.0, prompt_dist="fixed:100", decode_dist="fixed:7", seed=3)
        assert all(r.prompt_tokens == 100 and r.decode_tokens == 7 for r in trace)

    def test_max_total_clamp(self):
        trace = generate_trace(
            50, qps=1.0, prompt_dist="uniform:100:200", decode_dist="fixed:50",
            seed=4, max_total_tokens=120,
        )
        assert all(r.prompt_tokens + r.decode_tokens <= 120 for r in trace)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            generate_trace(0, qps=1.0)
        with pytest.raises(ValueError):
            generate_trace(5, qps=0.0)
