from __future__ import annotations

import copy
import json
import os
import shutil
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from kgmend import PipelineConfig, load_config_file, load_trace
from kgmend.cli import main as cli_main
from kgmend.config import apply_config_entries
from kgmend.pipeline import (
    bench_refinement,
    report_to_dict,
    run_corpus,
    run_pipeline,
)
from conftest import CORPUS_DIR, KG_PATH, SYNONYMS_PATH


def strip_timing(doc: dict) -> dict:
    doc = copy.deepcopy(doc)
    doc.pop("timings", None)
    for r in doc.get("retrievals", []):
        r.pop("elapsed", None)
    return doc


class TestConfig:
    def test_defaults_valid(self):
        PipelineConfig().validate()

    def test_bad_weights_rejected(self):
        cfg = apply_config_entries(PipelineConfig(), {"w_object": "0.9"})
        with pytest.raises(ValueError, match="sum to 1"):
            cfg.validate()

    def test_bad_tau_rejected(self):
        with pytest.raises(ValueError, match="tau"):
            apply_config_entries(PipelineConfig(), {"tau": "1.5"}).validate()

    def test_external_mode_needs_endpoint(self):
        cfg = apply_config_entries(PipelineConfig(), {"extractor": "external"})
        with pytest.raises(ValueError, match="endpoint"):
            cfg.validate()

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            apply_config_entries(PipelineConfig(), {"bogus": "1"})

    def test_file_parsing_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "pipeline.conf"
        cfg_file.write_text(
            "# comment\n"
            "criteria = c_e, c_m\n"
            "tau = 0.7\n"
            "fence_k = 2.0  # inline comment\n"
            "refinement = off\n",
            encoding="utf-8",
        )
        cfg = load_config_file(str(cfg_file))
        assert cfg.criteria == frozenset({"c_e", "c_m"})
        assert cfg.tau == 0.7
        assert cfg.fence_k == 2.0
        assert cfg.refinement is False
        overridden = apply_config_entries(cfg, {"tau": "0.9"})
        assert overridden.tau == 0.9
        assert overridden.fence_k == 2.0


class TestRunPipeline:
    def test_clean_trace_no_work(self, fixture_kg, manifest):
        trace = load_trace(os.path.join(CORPUS_DIR, manifest[0]["clean_file"]))
        report = run_pipeline(trace, fixture_kg, PipelineConfig())
        assert report.counts["refined"] == 0
        assert report.kg_query_count == 0
        assert report.rectified.text == trace.header.answer
        assert report.rectified.edits == ()

    def test_injected_error_is_replaced(self, fixture_kg, manifest):
        case = manifest[0]
        trace = load_trace(os.path.join(CORPUS_DIR, case["err_file"]))
        report = run_pipeline(trace, fixture_kg, PipelineConfig())
        outcomes = [d.outcome for d in report.decisions]
        assert outcomes == ["replaced"]
        assert report.decisions[0].final.object == case["correct_object"]
        assert case["correct_object"] in report.rectified.text
        assert case["wrong_object"] not in report.rectified.text
        assert report.rectified.text == case["clean_answer"]

    def test_refinement_off_same_text_more_queries(self, fixture_kg, manifest):
        case = manifest[1]
        trace = load_trace(os.path.join(CORPUS_DIR, case["err_file"]))
        on = run_pipeline(trace, fixture_kg, PipelineConfig())
        off = run_pipeline(trace, fixture_kg, replace(PipelineConfig(), refinement=False))
        assert on.rectified.text == off.rectified.text
        assert off.kg_query_count > on.kg_query_count
        assert off.counts["refined"] == off.counts["all_triples"]

    def test_report_accounting(self, fixture_kg, manifest):
        trace = load_trace(os.path.join(CORPUS_DIR, manifest[2]["err_file"]))
        report = run_pipeline(trace, fixture_kg, replace(PipelineConfig(), refinement=False))
        assert report.kg_query_count == sum(r["query_count"] for r in report.retrievals)
        assert report.counts["refined"] <= report.counts["all_triples"]
        assert report.counts["expanded"] == sum(r["expanded"] for r in report.retrievals)

    def test_deterministic_reports(self, fixture_kg, manifest):
        trace = load_trace(os.path.join(CORPUS_DIR, manifest[3]["err_file"]))
        a = report_to_dict(run_pipeline(trace, fixture_kg, PipelineConfig()))
        b = report_to_dict(run_pipeline(trace, fixture_kg, PipelineConfig()))
        assert json.dumps(strip_timing(a), sort_keys=True) == json.dumps(
            strip_timing(b), sort_keys=True
        )

    def test_criteria_selectable_individually(self, fixture_kg, manifest):
        case = manifest[4]
        trace = load_trace(os.path.join(CORPUS_DIR, case["err_file"]))
        for criterion in ("c_m", "c_e", "c_js"):
            cfg = replace(PipelineConfig(), criteria=frozenset({criterion}))
            report = run_pipeline(trace, fixture_kg, cfg)
            assert report.rectified.text == case["clean_answer"], criterion


class TestRunCorpus:
    def test_empty_directory(self, tmp_path, fixture_kg):
        result = run_corpus(str(tmp_path), fixture_kg, PipelineConfig())
        assert result.reports == ()
        assert result.failures == ()
        assert result.aggregate["traces"] == 0
        assert result.aggregate["total_kg_query_count"] == 0

    def test_aggregate_equals_sums(self, fixture_kg):
        result = run_corpus(CORPUS_DIR, fixture_kg, PipelineConfig())
        assert result.aggregate["traces"] == 40
        assert result.aggregate["failures"] == 0
        assert result.aggregate["total_kg_query_count"] == sum(
            r.kg_query_count for _, r in result.reports
        )

    def test_malformed_trace_recorded_not_fatal(self, tmp_path, fixture_kg, manifest):
        for case in manifest[:3]:
            shutil.copy(os.path.join(CORPUS_DIR, case["err_file"]), tmp_path)
        (tmp_path / "broken.jsonl").write_text("{oops\n", encoding="utf-8")
        result = run_corpus(str(tmp_path), fixture_kg, PipelineConfig())
        assert len(result.reports) == 3
        assert len(result.failures) == 1
        assert "broken.jsonl" in result.failures[0][0]

    def test_parallel_equals_sequential(self, fixture_kg):
        seq = run_corpus(CORPUS_DIR, fixture_kg, PipelineConfig())
        par = run_corpus(CORPUS_DIR, fixture_kg, replace(PipelineConfig(), parallelism=4))
        assert [p for p, _ in seq.reports] == [p for p, _ in par.reports]
        for (_, a), (_, b) in zip(seq.reports, par.reports):
            da, db = strip_timing(report_to_dict(a)), strip_timing(report_to_dict(b))
            da["config"].pop("parallelism")
            db["config"].pop("parallelism")
            assert da == db


class TestBench:
    def test_refinement_never_costs_more(self, fixture_kg):
        comparison = bench_refinement(CORPUS_DIR, fixture_kg, PipelineConfig())
        for (_, on), (_, off) in zip(
            comparison.refined.reports, comparison.unrefined.reports
        ):
            assert on.kg_query_count <= off.kg_query_count

    def test_single_trace_corpus_matches_report(self, tmp_path, fixture_kg, manifest):
        shutil.copy(os.path.join(CORPUS_DIR, manifest[0]["err_file"]), tmp_path)
        comparison = bench_refinement(str(tmp_path), fixture_kg, PipelineConfig())
        s = comparison.summary
        _, on_report = comparison.refined.reports[0]
        _, off_report = comparison.unrefined.reports[0]
        assert s["refined"]["kg_query_count"] == on_report.kg_query_count
        assert s["unrefined"]["kg_query_count"] == off_report.kg_query_count
        assert s["query_count_ratio"] == pytest.approx(
            on_report.kg_query_count / off_report.kg_query_count
        )

    def test_no_flags_corpus_zero_ratio(self, tmp_path, fixture_kg, manifest):
        for case in manifest[:4]:
            shutil.copy(os.path.join(CORPUS_DIR, case["clean_file"]), tmp_path)
        comparison = bench_refinement(str(tmp_path), fixture_kg, PipelineConfig())
        assert comparison.summary["refined"]["kg_query_count"] == 0
        assert comparison.summary["unrefined"]["kg_query_count"] > 0
        assert comparison.summary["query_count_ratio"] == 0.0

    def test_human_readable_renders(self, tmp_path, fixture_kg, manifest):
        shutil.copy(os.path.join(CORPUS_DIR, manifest[0]["err_file"]), tmp_path)
        text = bench_refinement(str(tmp_path), fixture_kg, PipelineConfig()).human_readable()
        assert "refined" in text and "unrefined" in text


class _NeverUpHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        self.send_response(500)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def log_message(self, *args):
        pass


class TestExtractorFallback:
    def test_fallback_to_rules_recorded(self, fixture_kg, manifest):
        server = HTTPServer(("127.0.0.1", 0), _NeverUpHandler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            cfg = replace(
                PipelineConfig(),
                extractor="external-with-fallback",
                extractor_endpoint=f"http://127.0.0.1:{server.server_port}/x",
            )
            trace = load_trace(os.path.join(CORPUS_DIR, manifest[0]["err_file"]))
            report = run_pipeline(trace, fixture_kg, cfg)
            assert report.extractor_fallback is True
            assert report.rectified.text == manifest[0]["clean_answer"]
        finally:
            server.shutdown()
            server.server_close()

    def test_strict_external_mode_propagates(self, fixture_kg, manifest):
        from kgmend.pipeline import StageError

        cfg = replace(
            PipelineConfig(),
            extractor="external",
            extractor_endpoint="http://127.0.0.1:1/x",
        )
        trace = load_trace(os.path.join(CORPUS_DIR, manifest[0]["err_file"]))
        with pytest.raises(StageError, match=r"\[extract\]"):
            run_pipeline(trace, fixture_kg, cfg)


class TestCli:
    def run_cli(self, *argv):
        return cli_main(list(argv))

    def test_run_writes_report_and_rectified(self, tmp_path, manifest):
        out = tmp_path / "report.json"
        rectified = tmp_path / "fixed.txt"
        code = self.run_cli(
            "run",
            "--trace", os.path.join(CORPUS_DIR, manifest[0]["err_file"]),
            "--kg", KG_PATH,
            "--synonyms", SYNONYMS_PATH,
            "--out", str(out),
            "--rectified", str(rectified),
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["schema_version"] == 1
        assert doc["kg_query_count"] > 0
        assert rectified.read_text().strip() == manifest[0]["clean_answer"]

    def test_missing_trace_is_input_error(self, tmp_path):
        code = self.run_cli(
            "run", "--trace", str(tmp_path / "missing.jsonl"), "--kg", KG_PATH
        )
        assert code == 1

    def test_bad_config_is_input_error(self, manifest):
        code = self.run_cli(
            "run",
            "--trace", os.path.join(CORPUS_DIR, manifest[0]["err_file"]),
            "--kg", KG_PATH,
            "--tau", "2.0",
        )
        assert code == 1

    def test_service_failure_is_exit_2(self, manifest):
        code = self.run_cli(
            "run",
            "--trace", os.path.join(CORPUS_DIR, manifest[0]["err_file"]),
            "--kg", KG_PATH,
            "--extractor", "external",
            "--extractor-endpoint", "http://127.0.0.1:1/x",
        )
        assert code == 2

    def test_corpus_command(self, tmp_path):
        out = tmp_path / "corpus.json"
        code = self.run_cli(
            "corpus", "--dir", CORPUS_DIR, "--kg", KG_PATH,
            "--synonyms", SYNONYMS_PATH, "--out", str(out),
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["aggregate"]["traces"] == 40

    def test_bench_command(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        code = self.run_cli(
            "bench", "--dir", CORPUS_DIR, "--kg", KG_PATH,
            "--synonyms", SYNONYMS_PATH, "--out", str(out),
        )
        assert code == 0
        summary = json.loads(out.read_text())
        assert summary["query_count_ratio"] < 1.0
        assert "query-count ratio" in capsys.readouterr().out

    def test_detect_command(self, manifest, capsys):
        code = self.run_cli(
            "detect", "--trace", os.path.join(CORPUS_DIR, manifest[0]["err_file"])
        )
        assert code == 0
        assert manifest[0]["wrong_object"].split()[0] in capsys.readouterr().out

    def test_extract_command(self, capsys):
        code = self.run_cli("extract", "--text", "Flu is treated with rest.")
        assert code == 0
        assert "Flu\ttreated with\trest" in capsys.readouterr().out

    def test_query_command(self, capsys):
        code = self.run_cli(
            "query", "--kg", KG_PATH, "--synonyms", SYNONYMS_PATH,
            "--subject", "hypocortisolism", "--predicate", "identified by",
        )
        assert code == 0
        assert "blood tests" in capsys.readouterr().out

    def test_config_file_with_flag_override(self, tmp_path, manifest, capsys):
        cfg_file = tmp_path / "p.conf"
        cfg_file.write_text("refinement = off\ntau = 0.6\n", encoding="utf-8")
        code = self.run_cli(
            "run",
            "--trace", os.path.join(CORPUS_DIR, manifest[0]["clean_file"]),
            "--kg", KG_PATH,
            "--config", str(cfg_file),
            "--refinement", "on",
        )
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["config"]["refinement"] == "on"
        assert doc["config"]["tau"] == 0.6
