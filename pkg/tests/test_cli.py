"""Command-line pipeline: flags, exit codes, file outputs."""

import inspect
import json
import math
import os

import numpy as np
import pytest

from ssrmap import evalkit
from ssrmap.cli import EXIT_DATA, EXIT_IO, EXIT_OK, build_parser, main
from ssrmap.federated import FedConfig
from ssrmap.mapstore import (
    DatasetRecord,
    SyntheticSpec,
    bytes_per_element,
    read_map,
    save_dataset,
)
from ssrmap.ssr import SsrConfig

GEN_FLAGS = [
    "--places", "6", "--items-per-place", "5", "--dim", "32",
    "--head-dims", "4", "--alias-start", "16", "--seed", "5",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "data": str(root / "data.tsv"),
        "codec": str(root / "codec.bin"),
        "model": str(root / "model.ssr"),
        "map": str(root / "map.ssrm"),
        "root": root,
    }
    assert main(["gen-synthetic", "--out", paths["data"]] + GEN_FLAGS) == EXIT_OK
    assert main(["fit-codec", "--dataset", paths["data"], "--out", paths["codec"]]) == EXIT_OK
    assert main([
        "train", "--dataset", paths["data"], "--out", paths["model"],
        "--epochs", "2",
    ]) == EXIT_OK
    assert main([
        "compress", "--dataset", paths["data"], "--model", paths["model"],
        "--codec", paths["codec"], "--out", paths["map"], "--dims", "8",
    ]) == EXIT_OK
    return paths


class TestHelpSync:
    def test_train_defaults_match_module(self):
        args = build_parser().parse_args(["train", "--dataset", "d", "--out", "o"])
        cfg = SsrConfig()
        assert args.temperature == cfg.temperature
        assert args.alpha == cfg.alpha
        assert args.epochs == cfg.epochs
        assert args.learning_rate == cfg.learning_rate
        assert args.batch_size == cfg.batch_size
        assert args.seed == cfg.seed
        assert args.include_diagonal is False and cfg.exclude_diagonal is True
        assert args.swap_kl == cfg.swap_kl

    def test_fed_train_defaults_match_module(self):
        args = build_parser().parse_args(["fed-train", "--dataset", "d", "--out", "o"])
        cfg = FedConfig()
        assert args.nodes == cfg.nodes
        assert args.rounds == cfg.rounds
        assert args.local_epochs == cfg.local_epochs
        assert args.partition == cfg.partition
        assert args.weighted == cfg.weighted

    def test_gen_synthetic_defaults_match_module(self):
        args = build_parser().parse_args(["gen-synthetic", "--out", "o"])
        spec = SyntheticSpec()
        assert args.places == spec.num_places
        assert args.items_per_place == spec.items_per_place
        assert args.dim == spec.dim
        assert args.coarse_sigma == spec.coarse_sigma
        assert args.head_dims == spec.head_dims
        assert args.head_gain == spec.head_gain
        assert args.alias_start == spec.alias_start
        assert args.alias_sigma == spec.alias_sigma
        assert args.fine_sigma == spec.fine_sigma
        assert args.noise_sigma == spec.noise_sigma
        assert args.mean_sigma == spec.mean_sigma
        assert args.attribute_words == spec.attribute_words
        assert args.seed == spec.seed

    def test_eval_sweep_defaults_match_module(self):
        args = build_parser().parse_args(["eval-sweep", "--dataset", "d", "--out", "o"])
        sig = inspect.signature(evalkit.run_sweep).parameters
        assert args.methods == sig["methods"].default
        assert (args.dims or evalkit.DEFAULT_SWEEP_DIMS) == sig["dims"].default
        assert args.k == sig["k"].default
        assert args.alpha == sig["alpha"].default
        assert args.fraction == sig["fraction"].default
        assert args.codec_order == sig["codec_order"].default

    def test_help_renders_defaults_and_exit_codes(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert f"(default: {SsrConfig().temperature})" in text
        assert "exit codes:" in text

    def test_main_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for name in (
            "gen-synthetic", "fit-codec", "train", "fed-train", "compress",
            "query", "eval-sweep", "zip", "unzip", "inspect-map",
        ):
            assert name in text
        assert "exit codes:" in text


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", "d", "--out", "o", "--no-such-flag"])
        assert exc.value.code == 2

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_bad_dims_string_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", "d", "--out", "o", "--dims", "16,banana"])
        assert exc.value.code == 2

    def test_missing_file_exits_3(self, tmp_path, capsys):
        code = main(["fit-codec", "--dataset", str(tmp_path / "nope.tsv"),
                     "--out", str(tmp_path / "c.bin")])
        assert code == EXIT_IO
        err_lines = [l for l in capsys.readouterr().err.splitlines()
                     if l.startswith("error:")]
        assert len(err_lines) == 1
        assert "error: FileNotFoundError:" in err_lines[0]

    def test_corrupt_map_exits_4(self, tmp_path, capsys):
        bad = tmp_path / "bad.ssrm"
        bad.write_bytes(b"not a map file at all, definitely long enough")
        assert main(["inspect-map", str(bad)]) == EXIT_DATA
        err = capsys.readouterr().err
        assert "error:" in err

    def test_unknown_method_exits_4(self, pipeline, tmp_path, capsys):
        code = main(["eval-sweep", "--dataset", pipeline["data"],
                     "--out", str(tmp_path / "s.csv"), "--methods", "nope"])
        assert code == EXIT_DATA
        assert "nope" in capsys.readouterr().err

    def test_dataset_without_references_exits_4(self, tmp_path, capsys):
        records = [
            DatasetRecord(id="q0", place_id=0, split="query", caption="a b",
                          embedding=np.ones(4)),
            DatasetRecord(id="q1", place_id=1, split="query", caption="c d",
                          embedding=np.ones(4)),
        ]
        path = str(tmp_path / "queries-only.tsv")
        save_dataset(records, path)
        code = main(["train", "--dataset", path, "--out", str(tmp_path / "m.ssr")])
        assert code == EXIT_DATA
        assert "no reference rows" in capsys.readouterr().err


class TestGenSynthetic:
    def test_same_seed_identical_files(self, tmp_path):
        a, b = str(tmp_path / "a.tsv"), str(tmp_path / "b.tsv")
        assert main(["gen-synthetic", "--out", a] + GEN_FLAGS) == EXIT_OK
        assert main(["gen-synthetic", "--out", b] + GEN_FLAGS) == EXIT_OK
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()

    def test_different_seed_differs(self, tmp_path):
        a, b = str(tmp_path / "a.tsv"), str(tmp_path / "b.tsv")
        assert main(["gen-synthetic", "--out", a] + GEN_FLAGS) == EXIT_OK
        flags = GEN_FLAGS[:-1] + ["6"]
        assert main(["gen-synthetic", "--out", b] + flags) == EXIT_OK
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() != fb.read()

    def test_logs_resolved_config(self, tmp_path, capsys):
        out = str(tmp_path / "a.tsv")
        assert main(["gen-synthetic", "--out", out] + GEN_FLAGS) == EXIT_OK
        err = capsys.readouterr().err
        line = next(l for l in err.splitlines() if l.startswith("config: "))
        payload = json.loads(line[len("config: "):])
        assert payload["command"] == "gen-synthetic"
        assert payload["seed"] == 5
        assert payload["dim"] == 32


class TestZipUnzip:
    def test_round_trip_byte_identical(self, pipeline, tmp_path):
        src = tmp_path / "caps.txt"
        src.write_bytes("line one\nคำบรรยาย\x00\xff weird bytes\n".encode("utf-8", "surrogateescape"))
        z, back = str(tmp_path / "caps.z"), str(tmp_path / "caps.back")
        assert main(["zip", str(src), z, "--model", pipeline["codec"]]) == EXIT_OK
        assert main(["unzip", z, back, "--model", pipeline["codec"]]) == EXIT_OK
        with open(src, "rb") as fa, open(back, "rb") as fb:
            assert fa.read() == fb.read()

    def test_empty_file_round_trip(self, pipeline, tmp_path):
        src = tmp_path / "empty.txt"
        src.write_bytes(b"")
        z, back = str(tmp_path / "e.z"), str(tmp_path / "e.back")
        assert main(["zip", str(src), z, "--model", pipeline["codec"]]) == EXIT_OK
        assert main(["unzip", z, back, "--model", pipeline["codec"]]) == EXIT_OK
        assert back and open(back, "rb").read() == b""


class TestQuery:
    def test_output_format_and_ordering(self, pipeline, capsys):
        assert main(["query", "--map", pipeline["map"], "--model", pipeline["model"],
                     "--dataset", pipeline["data"], "--k", "3"]) == EXIT_OK
        out = capsys.readouterr().out
        rows = [line.split("\t") for line in out.splitlines() if line]
        cmap = read_map(pipeline["map"])
        ref_ids = set(cmap.ids)
        assert len(rows) == 6 * 3
        by_query = {}
        for qid, rank, rid, sim in rows:
            assert rid in ref_ids
            by_query.setdefault(qid, []).append((int(rank), float(sim)))
        assert len(by_query) == 6
        for pairs in by_query.values():
            assert [r for r, _ in pairs] == [1, 2, 3]
            sims = [s for _, s in pairs]
            assert sims == sorted(sims, reverse=True)

    def test_out_file_written(self, pipeline, tmp_path):
        out = str(tmp_path / "hits.tsv")
        assert main(["query", "--map", pipeline["map"], "--model", pipeline["model"],
                     "--dataset", pipeline["data"], "--k", "2", "--out", out]) == EXIT_OK
        with open(out) as fh:
            assert len(fh.read().splitlines()) == 6 * 2


class TestEvalSweep:
    def test_end_to_end_bytes_match_map_recount(self, pipeline, tmp_path):
        csv_path = str(tmp_path / "sweep.csv")
        assert main(["eval-sweep", "--dataset", pipeline["data"], "--out", csv_path,
                     "--methods", "ssr", "--dims", "8", "--k", "5",
                     "--no-plot"]) == EXIT_OK
        with open(csv_path) as fh:
            header, row = fh.read().splitlines()
        assert header == "method,dims,bytes_per_element,map_at_k,recall_at_k,seed"
        fields = row.split(",")
        assert fields[0] == "ssr" and fields[1] == "8"
        # same codec corpus and c, so the sweep cost must equal the map recount
        cmap = read_map(pipeline["map"])
        assert math.isclose(float(fields[2]), bytes_per_element(cmap), abs_tol=0.0)

    def test_plot_written_alongside_csv(self, pipeline, tmp_path):
        csv_path = str(tmp_path / "sweep.csv")
        assert main(["eval-sweep", "--dataset", pipeline["data"], "--out", csv_path,
                     "--methods", "ssr,text-only", "--dims", "8"]) == EXIT_OK
        png = tmp_path / "sweep.png"
        assert png.exists()
        with open(png, "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_no_temp_files_left(self, pipeline, tmp_path):
        csv_path = str(tmp_path / "sweep.csv")
        assert main(["eval-sweep", "--dataset", pipeline["data"], "--out", csv_path,
                     "--methods", "text-only", "--dims", "8"]) == EXIT_OK
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["sweep.csv", "sweep.png"]


class TestArtifacts:
    def test_no_temp_files_in_pipeline_dir(self, pipeline):
        names = [p.name for p in pipeline["root"].iterdir()]
        assert not [n for n in names if n.startswith(".tmp-")]

    def test_compress_reports_cost_fields(self, pipeline, tmp_path, capsys):
        out = str(tmp_path / "m16.ssrm")
        assert main(["compress", "--dataset", pipeline["data"],
                     "--model", pipeline["model"], "--codec", pipeline["codec"],
                     "--out", out, "--dims", "16", "--encoding", "q8"]) == EXIT_OK
        stdout = capsys.readouterr().out
        assert "bytes_per_element=" in stdout and "kb_per_element=" in stdout
        cmap = read_map(out)
        assert cmap.encoding == "q8" and cmap.c == 16

    def test_inspect_map_reports_header(self, pipeline, capsys):
        assert main(["inspect-map", pipeline["map"]]) == EXIT_OK
        out = capsys.readouterr().out
        assert "elements=24" in out
        assert "c=8" in out
        assert "encoding=fp32" in out
        assert "bytes_per_element=" in out
