import json
import shutil
from pathlib import Path

import pytest
from click.testing import CliRunner

from termeval.cli import extract_precondition_answer, load_config, main
from termeval._toml import TOMLDecodeError, loads as toml_loads

from conftest import FIXTURES


@pytest.fixture
def runner():
    return CliRunner()


def copy_fixture_workspace(tmp_path: Path) -> Path:
    """Isolated copy of corpus + cached run + config, so commands can write."""
    shutil.copytree(FIXTURES / "corpus", tmp_path / "corpus")
    shutil.copytree(FIXTURES / "runs", tmp_path / "runs")
    shutil.copy(FIXTURES / "score_config.toml", tmp_path / "score_config.toml")
    return tmp_path


class TestToml:
    def test_tables_and_arrays(self):
        data = toml_loads(
            '[corpus]\nroot = "x"  # comment\ncategories = ["Other", "MainHeap"]\n'
            "[eval]\npool_size = 20\nseed = 123\n"
            '[[models]]\nname = "a"\ntemperature = 1.0\n'
            '[[models]]\nname = "b"\nflag = true\n')
        assert data["corpus"]["root"] == "x"
        assert data["corpus"]["categories"] == ["Other", "MainHeap"]
        assert data["eval"]["pool_size"] == 20
        assert [m["name"] for m in data["models"]] == ["a", "b"]
        assert data["models"][1]["flag"] is True

    def test_numbers(self):
        data = toml_loads("a = -3\nb = 0.5\nc = 1_000\nd = [1, 2, 3]\n")
        assert data == {"a": -3, "b": 0.5, "c": 1000, "d": [1, 2, 3]}

    def test_duplicate_key_rejected(self):
        with pytest.raises(TOMLDecodeError):
            toml_loads("a = 1\na = 2\n")

    def test_bad_line_rejected(self):
        with pytest.raises(TOMLDecodeError):
            toml_loads("what is this\n")

    def test_string_with_hash(self):
        data = toml_loads('path = "a#b"  # real comment\n')
        assert data["path"] == "a#b"


class TestLoadConfig:
    def test_fixture_config(self):
        config = load_config(FIXTURES / "score_config.toml")
        assert config.eval.pool_size == 3
        assert config.eval.rng_seed == 20250809
        assert config.checker.nondet_domain == (-16, 16)
        assert config.corpus_root == FIXTURES / "corpus"
        assert config.validator is None
        assert config.prompt_kind == "termination"

    def test_relative_paths_resolve_from_config(self, tmp_path):
        (tmp_path / "conf").mkdir()
        config_path = tmp_path / "conf" / "c.toml"
        config_path.write_text('[corpus]\nroot = "../data"\n')
        config = load_config(config_path)
        assert config.corpus_root == tmp_path / "conf" / ".." / "data"

    def test_model_presets(self, tmp_path):
        config_path = tmp_path / "c.toml"
        config_path.write_text(
            '[corpus]\nroot = "x"\n'
            '[[models]]\nname = "m"\nendpoint_url = "http://e"\n'
            'preset = "reasoning-medium"\n')
        config = load_config(config_path)
        assert config.models[0].reasoning_effort == "medium"
        assert config.models[0].temperature is None

    def test_live_model_requires_endpoint(self, tmp_path):
        import click
        config_path = tmp_path / "c.toml"
        config_path.write_text('[corpus]\nroot = "x"\n[[models]]\nname = "m"\n')
        with pytest.raises(click.ClickException):
            load_config(config_path)


class TestIngestCommand:
    def test_counts_table(self, runner):
        result = runner.invoke(main, ["ingest", str(FIXTURES / "corpus")])
        assert "BitVectors" in result.output
        assert "MainControlFlow" in result.output
        assert "total" in result.output
        assert "labels: T=1 NT=5" in result.output
        # the ghost task has no source file: collected error, exit 1
        assert result.exit_code == 1

    def test_manifest_written(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        (workspace / "corpus" / "misc" / "ghost.yml").unlink()
        out = tmp_path / "manifest.json"
        result = runner.invoke(main, ["ingest", str(workspace / "corpus"),
                                      "-o", str(out)])
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert len(payload["tasks"]) == 6
        assert payload["category_counts"]["MainControlFlow"] == 3

    def test_empty_dir(self, runner, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        result = runner.invoke(main, ["ingest", str(empty)])
        assert result.exit_code == 0
        assert "total" in result.output

    def test_bad_path_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, ["ingest", str(tmp_path / "missing")])
        assert result.exit_code == 2


class TestCheckWitnessCommand:
    def test_feasible_witness_exit_0(self, runner):
        result = runner.invoke(main, [
            "check-witness",
            str(FIXTURES / "programs" / "absorb_to_zero.c"),
            str(FIXTURES / "witnesses" / "absorb_to_zero.json"),
        ])
        assert result.exit_code == 0, result.output
        assert "schema: ok" in result.output
        assert "ProvenInfinite" in result.output

    def test_duplicate_id_exit_1(self, runner, tmp_path):
        data = json.loads(
            (FIXTURES / "witnesses" / "even_spin.json").read_text())
        data["witness"]["edges"][1]["id"] = "E0"
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(data))
        result = runner.invoke(main, [
            "check-witness", str(FIXTURES / "programs" / "even_spin.c"),
            str(bad),
        ])
        assert result.exit_code == 1
        assert "DuplicateEdgeId" in result.output

    def test_emit_deterministic(self, runner, tmp_path):
        out_a = tmp_path / "a.graphml"
        out_b = tmp_path / "b.graphml"
        for out in (out_a, out_b):
            result = runner.invoke(main, [
                "check-witness", str(FIXTURES / "programs" / "even_spin.c"),
                str(FIXTURES / "witnesses" / "even_spin.json"),
                "--emit", str(out), "--clock", "2025-06-01T12:00:00Z",
            ])
            assert result.exit_code == 0, result.output
        assert out_a.read_bytes() == out_b.read_bytes()
        assert b"2025-06-01T12:00:00Z" in out_a.read_bytes()

    def test_validate_without_emit_uses_scratch_file(self, runner, tmp_path):
        import stat
        validator_root = tmp_path / "validator"
        validator_root.mkdir()
        script = validator_root / "Ultimate.py"
        script.write_text("#!/bin/sh\necho FALSE\n")
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        config = tmp_path / "c.toml"
        config.write_text('[corpus]\nroot = "."\n'
                          f'[validator]\nroot = "{validator_root}"\n')
        result = runner.invoke(main, [
            "check-witness",
            str(FIXTURES / "programs" / "absorb_to_zero.c"),
            str(FIXTURES / "witnesses" / "absorb_to_zero.json"),
            "--validate", "-c", str(config),
        ])
        assert result.exit_code == 0, result.output
        assert "external validator: validated" in result.output

    def test_infeasible_exit_1(self, runner, tmp_path):
        data = json.loads(
            (FIXTURES / "witnesses" / "even_spin.json").read_text())
        data["witness"]["edges"][2]["assumption"] = "x % 2 == 1"
        bad = tmp_path / "mutated.json"
        bad.write_text(json.dumps(data))
        result = runner.invoke(main, [
            "check-witness", str(FIXTURES / "programs" / "even_spin.c"),
            str(bad),
        ])
        assert result.exit_code == 1
        assert "Infeasible" in result.output


class TestScoreCommand:
    def test_reports_written(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        result = runner.invoke(main, [
            "score", str(workspace / "runs" / "demo"),
            "-c", str(workspace / "score_config.toml"),
            "-o", str(workspace / "report"),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((workspace / "report" / "report.json").read_text())
        assert {m["model"] for m in report["models"]} == {"oracle-a", "oracle-b"}
        assert report["witness_check_mode"] == "internal-checker"
        text = (workspace / "report" / "report.txt").read_text()
        assert "oracle-a" in text
        csv_text = (workspace / "report" / "per_run_scores.csv").read_text()
        assert csv_text.splitlines()[0] == "model,mode,run,score"
        # 2 models x 2 modes x 25 runs
        assert len(csv_text.splitlines()) == 1 + 2 * 2 * 25

    def test_byte_identical_reruns(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        outputs = []
        # the parallel path must produce the same bytes as the serial one
        for label, jobs in (("first", "1"), ("second", "1"), ("parallel", "4")):
            out = workspace / f"report_{label}"
            result = runner.invoke(main, [
                "score", str(workspace / "runs" / "demo"),
                "-c", str(workspace / "score_config.toml"), "-o", str(out),
                "--jobs", jobs,
            ])
            assert result.exit_code == 0, result.output
            outputs.append({
                name: (out / name).read_bytes()
                for name in ("report.json", "report.txt", "per_run_scores.csv")
            })
        assert outputs[0] == outputs[1] == outputs[2]

    def test_incomplete_pool_exit_1(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        victim = (workspace / "runs" / "demo" / "oracle-a" /
                  "control-loops" / "count_to_ten" / "2.json")
        victim.unlink()
        result = runner.invoke(main, [
            "score", str(workspace / "runs" / "demo"),
            "-c", str(workspace / "score_config.toml"),
        ])
        assert result.exit_code == 1
        assert "count_to_ten" in result.stderr

    def test_external_validator_mode(self, runner, tmp_path):
        import stat
        workspace = copy_fixture_workspace(tmp_path)
        validator_root = workspace / "validator"
        validator_root.mkdir()
        script = validator_root / "Ultimate.py"
        script.write_text("#!/bin/sh\necho 'RESULT: FALSE(TERM)'\n")
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        config = workspace / "score_config.toml"
        config.write_text(config.read_text() +
                          f'\n[validator]\nroot = "validator"\n')
        result = runner.invoke(main, [
            "score", str(workspace / "runs" / "demo"),
            "-c", str(config), "-o", str(workspace / "report"),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((workspace / "report" / "report.json").read_text())
        assert report["witness_check_mode"] == "external-validator"
        by_model = {m["model"]: m for m in report["models"]}
        # the rubber-stamp validator confirms every schema-valid witness;
        # oracle-a still has 2 witness-less NT answers among 11 correct NT
        # predictions, so validity is 9/11
        assert by_model["oracle-a"]["witness"]["validity"] == \
            pytest.approx(9 / 11)

    def test_single_mode_mean_matches_hand_computation(self, runner, tmp_path):
        # hand-derived per-sample points for the bundled oracle-a records
        # (witness statuses per the internal checker):
        #   even_spin (NT, BitVectors):  confirmed witness, bare NT, unknown
        #   absorb (NT, MCF):            three confirmed witnesses
        #   count_to_ten (T, MCF):       three correct T answers
        #   stall (NT, MCF):             confirmed, refuted witness, wrong T
        #   heap_user (NT, Other):       unconfirmable witness, unknown, junk
        #   negate (NT, Other):          two confirmed, one bare NT
        points = {
            ("BitVectors", 1): [1, 0, 0],
            ("MainControlFlow-absorb", 3): [1, 1, 1],
            ("MainControlFlow-count", 3): [2, 2, 2],
            ("MainControlFlow-stall", 3): [1, 0, -32],
            ("Other-heap", 2): [0, 0, 0],
            ("Other-negate", 2): [1, 1, 0],
        }
        # expected single-draw score by linearity: each task contributes
        # (N/k) * mean(points)/n_category with N=6, k=3
        contributions = {key: sum(vals) / 3 for key, vals in points.items()}
        exact = (6 / 3) * (
            contributions[("BitVectors", 1)] / 1
            + (contributions[("MainControlFlow-absorb", 3)]
               + contributions[("MainControlFlow-count", 3)]
               + contributions[("MainControlFlow-stall", 3)]) / 3
            + (contributions[("Other-heap", 2)]
               + contributions[("Other-negate", 2)]) / 2
        )
        assert exact == pytest.approx(-32 / 9)

        workspace = copy_fixture_workspace(tmp_path)
        config = workspace / "score_config.toml"
        config.write_text(config.read_text().replace(
            "n_bootstrap = 25", "n_bootstrap = 400"))
        result = runner.invoke(main, [
            "score", str(workspace / "runs" / "demo"),
            "-c", str(config), "-o", str(workspace / "report"),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((workspace / "report" / "report.json").read_text())
        by_model = {m["model"]: m for m in report["models"]}
        stats = by_model["oracle-a"]["svcomp_single"]
        margin = 5 * stats["std"] / (400 ** 0.5)
        assert abs(stats["mean"] - exact) < margin

    def test_sensible_scores(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        result = runner.invoke(main, [
            "score", str(workspace / "runs" / "demo"),
            "-c", str(workspace / "score_config.toml"),
            "-o", str(workspace / "report"),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((workspace / "report" / "report.json").read_text())
        by_model = {m["model"]: m for m in report["models"]}
        # oracle-a answers are mostly right, oracle-b flips T labels: the
        # -32 penalties must rank b below a in both modes
        assert by_model["oracle-a"]["svcomp_single"]["mean"] > \
            by_model["oracle-b"]["svcomp_single"]["mean"]
        assert by_model["oracle-a"]["witness"]["validity"] > 0


class TestRunCommand:
    def test_replay_run_touches_no_network(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        (workspace / "corpus" / "misc" / "ghost.yml").unlink()
        config = workspace / "run_config.toml"
        config.write_text(
            '[corpus]\nroot = "corpus"\n'
            "[eval]\npool_size = 3\n"
            '[output]\ndir = "."\n'
            '[[models]]\nname = "oracle-a"\nmode = "replay"\n')
        result = runner.invoke(main, ["run", "-c", str(config),
                                      "--run-id", "demo"])
        assert result.exit_code == 0, result.output

    def test_live_run_against_stub_endpoint(self, runner, tmp_path):
        from test_oracle import StubEndpoint
        workspace = copy_fixture_workspace(tmp_path)
        (workspace / "corpus" / "misc" / "ghost.yml").unlink()
        server = StubEndpoint()
        try:
            config = workspace / "live_config.toml"
            config.write_text(
                '[corpus]\nroot = "corpus"\n'
                "[eval]\npool_size = 2\n"
                '[output]\ndir = "out"\n'
                '[[models]]\nname = "stub-model"\n'
                f'endpoint_url = "{server.url}"\n'
                'preset = "t10"\n')
            result = runner.invoke(main, ["run", "-c", str(config),
                                          "--run-id", "live", "--jobs", "2"])
            assert result.exit_code == 0, result.output
            run_dir = workspace / "out" / "runs" / "live"
            records = list(run_dir.rglob("*.json"))
            assert len(records) == 6 * 2  # tasks x pool_size
            assert len(server.requests) == 12
            body = server.requests[0]["body"]
            assert body["temperature"] == 1.0 and body["top_p"] == 0.95
            # the prompt carries the numbered program under test
            assert "1: " in body["messages"][0]["content"]
        finally:
            server.close()

    def test_replay_with_missing_records_fails(self, runner, tmp_path):
        workspace = copy_fixture_workspace(tmp_path)
        (workspace / "corpus" / "misc" / "ghost.yml").unlink()
        config = workspace / "run_config.toml"
        config.write_text(
            '[corpus]\nroot = "corpus"\n'
            "[eval]\npool_size = 5\n"  # cache only has 3
            '[output]\ndir = "."\n'
            '[[models]]\nname = "oracle-a"\nmode = "replay"\n')
        result = runner.invoke(main, ["run", "-c", str(config),
                                      "--run-id", "demo"])
        assert result.exit_code == 1


class TestPrecondCommand:
    def make_precond_run(self, tmp_path, answers_by_task):
        workspace = copy_fixture_workspace(tmp_path)
        (workspace / "corpus" / "misc" / "ghost.yml").unlink()
        run_dir = workspace / "runs" / "domains"
        for task_id, answers in answers_by_task.items():
            for index, text in enumerate(answers):
                payload = {
                    "task_id": task_id, "model": "oracle-a",
                    "sample_index": index, "prompt_hash": "x",
                    "raw_text": text, "latency": 0.0, "timestamp": 0.0,
                }
                path = run_dir / "oracle-a" / task_id / f"{index}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(payload))
        return workspace, run_dir

    def test_all_equivalent_pass1(self, runner, tmp_path):
        workspace, run_dir = self.make_precond_run(tmp_path, {
            "bitvector-spin/even_spin": ["x % 2 == 0"] * 10,
        })
        annotations = workspace / "annotations.json"
        annotations.write_text(json.dumps(
            {"bitvector-spin/even_spin": "x % 2 == 0"}))
        result = runner.invoke(main, [
            "precond", str(run_dir), str(annotations),
            "-c", str(workspace / "score_config.toml"),
        ])
        assert result.exit_code == 0, result.output
        assert "Pass@1 1.000" in result.output

    def test_half_correct_pass3(self, runner, tmp_path):
        answers = ["x % 2 == 0"] * 5 + ["x > 0"] * 5
        workspace, run_dir = self.make_precond_run(tmp_path, {
            "bitvector-spin/even_spin": answers,
        })
        annotations = workspace / "annotations.json"
        annotations.write_text(json.dumps(
            {"bitvector-spin/even_spin": "x % 2 == 0"}))
        out = workspace / "precond.json"
        result = runner.invoke(main, [
            "precond", str(run_dir), str(annotations),
            "-c", str(workspace / "score_config.toml"), "-o", str(out),
        ])
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        task = payload["oracle-a"]["per_task"]["bitvector-spin/even_spin"]
        assert task["pass@1"] == pytest.approx(0.5)
        assert task["pass@3"] == pytest.approx(11 / 12)

    def test_equivalent_rewriting_accepted(self, runner, tmp_path):
        # syntactically different but equivalent formulations must count
        workspace, run_dir = self.make_precond_run(tmp_path, {
            "control-loops/stall_below_minus_five": ["i < -4"] * 10,
        })
        annotations = workspace / "annotations.json"
        annotations.write_text(json.dumps(
            {"control-loops/stall_below_minus_five": "i <= -5"}))
        result = runner.invoke(main, [
            "precond", str(run_dir), str(annotations),
            "-c", str(workspace / "score_config.toml"),
        ])
        assert result.exit_code == 0, result.output
        assert "Pass@1 1.000" in result.output

    def test_unparseable_annotation_fatal(self, runner, tmp_path):
        workspace, run_dir = self.make_precond_run(tmp_path, {
            "bitvector-spin/even_spin": ["x % 2 == 0"] * 2,
        })
        annotations = workspace / "annotations.json"
        annotations.write_text(json.dumps(
            {"bitvector-spin/even_spin": ")))("}))
        result = runner.invoke(main, [
            "precond", str(run_dir), str(annotations),
            "-c", str(workspace / "score_config.toml"),
        ])
        assert result.exit_code == 2

    def test_answer_extraction(self):
        assert extract_precondition_answer(
            "reasoning...\n<answer>i <= -5</answer>") == "i <= -5"
        assert extract_precondition_answer(
            "thinking\n\nx > 0 and y < 2\n") == "x > 0 and y < 2"
        assert extract_precondition_answer("") == ""
