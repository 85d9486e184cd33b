import copy
import json
import tempfile
import unittest
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from apps.backbone.towers import ConfigError
from apps.evalkit.evaluation import evaluate_task
from apps.evalkit.models import SweepCell
from apps.evalkit.sweeps import N_CROSS_LAYERS, run_ablation, run_data_fraction_sweep
from apps.inference.generation import DecodePlan, GenerationResult, generate
from apps.interleave.sequences import InterleavedSequence, Modality
from apps.synthdata.corpus import build_corpus
from apps.training.builders import SINGLE_DECODER, ZIPPER, load_tower
from apps.training.examples import Task
from apps.training.trainer import moving_average

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    apply_state,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_tower_states,
    save_checkpoint,
    tower_paths,
)
from .config import load_config, load_config_dict
from .pipeline import MODEL_FILE, build_prompt, describe_generation, load_model, run_pretrain, run_train

TINY = {
    "seed": 0,
    "backbone_a": {"d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16, "max_seq_len": 32},
    "backbone_b": {"d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16, "max_seq_len": 32},
    "zipper": {"n_zips": 2, "proj_hidden": 8, "input_proj_layers": 1},
    "pretrain": {"steps": 2, "batch_size": 2},
    "train": {"steps": 2, "batch_size": 2, "learning_rate": 0.01, "log_every": 0},
    "corpus": {"n_pairs": 8, "n_unpaired": 4, "n_unpaired_text": 4, "n_heldout": 2, "max_words": 2, "max_chars": 14},
    "eval": {"max_text_tokens": 4, "max_speech_tokens": 4},
    "sweep": {"fractions": [1.0], "kinds": ["zipper"], "seeds": [0], "ablation_n_zips": [0]},
}


def tiny_config(**sections):
    data = copy.deepcopy(TINY)
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    return data


def tiny_experiment(out, **sections):
    return load_config_dict(tiny_config(output_dir=str(out), **sections))


def write_config(directory, **sections):
    path = Path(directory) / "config.json"
    path.write_text(json.dumps(tiny_config(**sections)))
    return str(path)


### CONFIG TESTS

class ConfigTest(SimpleTestCase):
    def test_defaults(self):
        experiment = load_config()
        self.assertEqual(experiment.backbone_a.vocab_size, 31)
        self.assertEqual(experiment.backbone_b.vocab_size, 1026)
        self.assertTrue(experiment.zipper.freeze_a)
        self.assertFalse(experiment.zipper.freeze_b)

    def test_unknown_keys_name_their_path(self):
        with self.assertRaisesMessage(ConfigError, "bogus: Unknown key."):
            load_config_dict({"bogus": 1})
        with self.assertRaisesMessage(ConfigError, "zipper.bogus: Unknown key."):
            load_config_dict({"zipper": {"bogus": 1}})

    def test_field_errors_name_their_path(self):
        with self.assertRaisesMessage(ConfigError, "train.learning_rate"):
            load_config_dict({"train": {"learning_rate": 0}})
        with self.assertRaisesMessage(ConfigError, "eval.bucket_edges"):
            load_config_dict({"eval": {"bucket_edges": [3, 2]}})

    def test_n_zips_is_checked_against_the_towers(self):
        with self.assertRaisesMessage(ConfigError, "zipper.n_zips"):
            load_config_dict(tiny_config(zipper={"n_zips": 3}))
        with self.assertRaisesMessage(ConfigError, "zipper.n_zips"):
            load_config_dict(tiny_config(zipper={"i_a": 2, "n_zips": 2}))

    def test_round_trip(self):
        experiment = load_config_dict(tiny_config(train={"task_mix": [1, 1.26]}))
        self.assertEqual(load_config_dict(experiment.to_dict()), experiment)

    def test_seed_reaches_every_section(self):
        experiment = load_config_dict(TINY).with_seed(7)
        self.assertEqual({experiment.corpus.seed, experiment.train.seed, experiment.pretrain.seed}, {7})

    def test_config_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(load_config(write_config(tmp)), load_config_dict(TINY))
            broken = Path(tmp) / "broken.json"
            broken.write_text("{")
            with self.assertRaisesMessage(ConfigError, "not valid JSON"):
                load_config(broken)
            with self.assertRaisesMessage(ConfigError, "does not exist"):
                load_config(Path(tmp) / "missing.json")


### CHECKPOINT TESTS

def sample_checkpoint():
    return Checkpoint(
        {"format": "tower", "modality": "B", "steps": 3},
        {
            "model/w": np.arange(6, dtype=np.float32).reshape(2, 3) / 7,
            "model/b": np.array([1.5, -2.25], dtype=np.float32),
            "model/s": np.array(3.0, dtype=np.float32),
        },
    )


class CheckpointTest(SimpleTestCase):
    def test_round_trip_is_byte_identical(self):
        data = encode_checkpoint(sample_checkpoint())
        decoded = decode_checkpoint(data)
        self.assertEqual(encode_checkpoint(decoded), data)
        self.assertEqual(decoded.metadata, sample_checkpoint().metadata)
        for name, value in sample_checkpoint().tensors.items():
            np.testing.assert_array_equal(decoded.tensors[name], value)
            self.assertEqual(decoded.tensors[name].shape, value.shape)

    def test_layout(self):
        data = encode_checkpoint(sample_checkpoint())
        self.assertEqual(data[:4], b"ZIPC")
        self.assertEqual(int.from_bytes(data[4:8], "little"), 1)

    def test_rejects_bad_input(self):
        data = encode_checkpoint(sample_checkpoint())
        with self.assertRaisesMessage(CheckpointError, "bad magic"):
            decode_checkpoint(b"ZIPX" + data[4:])
        with self.assertRaisesMessage(CheckpointError, "unsupported checkpoint version 2"):
            decode_checkpoint(data[:4] + (2).to_bytes(4, "little") + data[8:])
        with self.assertRaisesMessage(CheckpointError, "truncated"):
            decode_checkpoint(data[:-3])
        with self.assertRaisesMessage(CheckpointError, "trailing bytes"):
            decode_checkpoint(data + b"\x00")

    def test_save_creates_directories(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "a" / "b" / "tower.ckpt", sample_checkpoint())
            self.assertEqual(load_checkpoint(path).metadata["steps"], 3)
            self.assertEqual(tower_paths([path]), {"B": str(path)})
            with self.assertRaises(CheckpointError):
                load_checkpoint(Path(tmp) / "missing.ckpt")

    def test_apply_state_names_the_mismatch(self):
        experiment = load_config_dict(TINY)
        tower = load_tower(experiment.backbone_b, 0, "tower_b")
        state = tower.state_dict()
        state["token_embedding"] = state["token_embedding"][:, :4]
        with self.assertRaisesMessage(CheckpointError, "parameter token_embedding"):
            apply_state(tower, state)
        del state["token_embedding"]
        with self.assertRaisesMessage(CheckpointError, "no parameter token_embedding"):
            apply_state(tower, state)


### PIPELINE TESTS

class PretrainTest(SimpleTestCase):
    def test_zero_steps_saves_the_initialization(self):
        with tempfile.TemporaryDirectory() as tmp:
            experiment = tiny_experiment(Path(tmp) / "new", pretrain={"steps": 0})
            paths = run_pretrain(experiment)
            self.assertEqual(list(paths), [Modality.B])
            saved = load_checkpoint(paths[Modality.B])
            self.assertEqual(saved.metadata["modality"], "B")
            fresh = load_tower(experiment.backbone_b, experiment.seed, "tower_b").state_dict()
            stored = saved.group("model")
            self.assertEqual(set(stored), set(fresh))
            for name, value in fresh.items():
                np.testing.assert_array_equal(stored[name], value)

    def test_reruns_are_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = run_pretrain(tiny_experiment(Path(tmp) / "1", pretrain={"text": True}))
            second = run_pretrain(tiny_experiment(Path(tmp) / "2", pretrain={"text": True}))
            self.assertEqual(set(first), {Modality.A, Modality.B})
            for modality in first:
                self.assertEqual(first[modality].read_bytes(), second[modality].read_bytes())
            records = (Path(tmp) / "1" / "metrics_pretrain_b.jsonl").read_text().splitlines()
            self.assertEqual([json.loads(r)["step"] for r in records], [1, 2])


class TrainTest(SimpleTestCase):
    def test_frozen_text_tower_and_pretrained_speech_tower(self):
        with tempfile.TemporaryDirectory() as tmp:
            experiment = tiny_experiment(tmp)
            towers = run_pretrain(experiment)
            path, trainer = run_train(experiment, tower_paths=tower_paths(towers.values()))
            self.assertEqual(trainer.step, 2)
            model, kind, _, checkpoint = load_model(path)
            self.assertEqual(kind, ZIPPER)
            self.assertEqual(checkpoint.metadata["step"], 2)
            fresh_a = load_tower(experiment.backbone_a, experiment.seed, "tower_a").state_dict()
            for name, value in model.tower(Modality.A).state_dict().items():
                np.testing.assert_array_equal(value, fresh_a[name])
            pretrained_b = load_checkpoint(towers[Modality.B]).group("model")
            trained_b = model.tower(Modality.B).state_dict()
            self.assertFalse(all(np.array_equal(trained_b[n], pretrained_b[n]) for n in trained_b))

    def test_baseline(self):
        with tempfile.TemporaryDirectory() as tmp:
            path, _ = run_train(tiny_experiment(tmp), kind=SINGLE_DECODER)
            model, kind, _, _ = load_model(path)
            self.assertEqual(kind, SINGLE_DECODER)
            self.assertEqual(model.config.vocab_size, 31 + 1026)

    def test_freeze_overrides(self):
        with tempfile.TemporaryDirectory() as tmp:
            path, _ = run_train(tiny_experiment(tmp), freeze_a=False, freeze_b=True)
            model, _, _, _ = load_model(path)
            self.assertEqual((model.config.freeze_a, model.config.freeze_b), (False, True))

    def test_resume_continues_identically(self):
        with tempfile.TemporaryDirectory() as tmp:
            train = {"steps": 4, "checkpoint_every": 2}
            straight, _ = run_train(tiny_experiment(Path(tmp) / "straight", train=train))
            interrupted = tiny_experiment(Path(tmp) / "resumed", train={**train, "steps": 2})
            run_train(interrupted)
            resumed, trainer = run_train(tiny_experiment(Path(tmp) / "resumed", train=train), resume=True)
            self.assertEqual(trainer.step, 4)
            expected, actual = load_checkpoint(straight), load_checkpoint(resumed)
            self.assertEqual(set(expected.tensors), set(actual.tensors))
            for name, value in expected.tensors.items():
                np.testing.assert_array_equal(actual.tensors[name], value, err_msg=name)
            self.assertEqual(expected.metadata["trainer"], actual.metadata["trainer"])

    def test_resume_trains_on_the_stored_corpus(self):
        with tempfile.TemporaryDirectory() as tmp:
            train = {"steps": 4, "checkpoint_every": 2}
            straight, _ = run_train(tiny_experiment(Path(tmp) / "straight", train=train))
            run_train(tiny_experiment(Path(tmp) / "resumed", train={**train, "steps": 2}))
            changed = tiny_experiment(Path(tmp) / "resumed", train=train, corpus={"n_pairs": 6, "max_words": 3})
            resumed, _ = run_train(changed, resume=True)
            expected, actual = load_checkpoint(straight), load_checkpoint(resumed)
            for name, value in expected.tensors.items():
                np.testing.assert_array_equal(actual.tensors[name], value, err_msg=name)
            self.assertEqual(actual.metadata["experiment"]["corpus"]["n_pairs"], 8)

    def test_resume_needs_a_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CheckpointError):
                run_train(tiny_experiment(tmp), resume=True)

    def test_without_cross_layers_asr_ignores_the_speech(self):
        with tempfile.TemporaryDirectory() as tmp:
            experiment = tiny_experiment(tmp, zipper={"n_zips": 0})
            path, _ = run_train(experiment)
            model, _, _, _ = load_model(path)
            corpus = build_corpus(experiment.corpus)
            result = evaluate_task(model, corpus.heldout_clean + corpus.heldout_other, "asr", experiment.eval)
            self.assertEqual(len({s.hypothesis for s in result.sentences}), 1)


### COMMAND TESTS

class CommandTest(SimpleTestCase):
    def call(self, *args):
        out = StringIO()
        call_command(*args, stdout=out)
        return out.getvalue()

    def test_pretrain_train_eval_generate(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = write_config(tmp)
            self.assertIn("tower B", self.call("pretrain", "--config", config, "--out", tmp))
            tower = str(Path(tmp) / "tower_b.ckpt")
            self.call("train", "--config", config, "--out", tmp, "--from", tower, "--plot")
            checkpoint = Path(tmp) / MODEL_FILE
            self.assertTrue(checkpoint.exists())
            self.assertTrue((Path(tmp) / "loss.png").exists())

            self.call("eval", "--config", config, "--out", tmp, "--oracle", "--compare", str(checkpoint))
            summary = pd.read_csv(Path(tmp) / "eval_summary.csv")
            oracle = summary[summary.model == "oracle"]
            self.assertEqual(oracle["wer"].tolist(), [0.0])
            self.assertEqual(len(summary[summary.model == ZIPPER]), 3)
            self.assertTrue((Path(tmp) / "eval_buckets.csv").exists())
            self.assertEqual(len(pd.read_csv(Path(tmp) / "eval_compare.csv")), 3)

            output = self.call("generate", str(checkpoint), "hello", "--plan", "text", "--max-tokens", "3")
            self.assertTrue(output.startswith("A: "))
            output = self.call("generate", str(checkpoint), "hello", "--prompt-modality", "text",
                               "--plan", "speech", "--max-tokens", "3")
            self.assertTrue(output.startswith("B: 1024"))

    def test_oracle_only(self):
        with tempfile.TemporaryDirectory() as tmp:
            output = self.call("eval", "--config", write_config(tmp), "--out", tmp, "--oracle")
            self.assertIn("oracle tts heldout_clean: WER 0.0000", output)

    def test_oracle_with_a_configured_codebook(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = write_config(tmp, corpus={"codebook_seed": 3, "codes_per_char": 3})
            output = self.call("eval", "--config", config, "--out", tmp, "--oracle")
            self.assertIn("oracle tts heldout_clean: WER 0.0000", output)

    def test_speech_output_is_decoded_with_the_model_codebook(self):
        codebook = load_config_dict(tiny_config(corpus={"codebook_seed": 3})).corpus.codebook
        tokens = codebook.encode("hi")
        result = GenerationResult(InterleavedSequence(), [(Modality.B, tokens)], [False])
        line = describe_generation(result, codebook)[0]
        self.assertEqual(line, "B: " + " ".join(map(str, tokens)) + " ('hi')")

    def test_baseline_flag(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.call("train", "--config", write_config(tmp), "--out", tmp, "--baseline")
            self.assertEqual(load_checkpoint(Path(tmp) / MODEL_FILE).metadata["kind"], SINGLE_DECODER)

    def test_seed_flag(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.call("train", "--config", write_config(tmp), "--out", tmp, "--seed", "5", "--no-freeze-a")
            metadata = load_checkpoint(Path(tmp) / MODEL_FILE).metadata
            self.assertEqual(metadata["seed"], 5)
            self.assertFalse(metadata["zipper"]["freeze_a"])

    def test_errors_become_command_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaisesMessage(CommandError, "zipper.n_zips"):
                self.call("train", "--config", write_config(tmp, zipper={"n_zips": 3}), "--out", tmp)
            with self.assertRaisesMessage(CommandError, "does not exist"):
                self.call("train", "--config", write_config(tmp), "--out", tmp, "--from", str(Path(tmp) / "x.ckpt"))
            with self.assertRaises(CommandError):
                self.call("generate", str(Path(tmp) / "missing.ckpt"), "hello")

    def test_tower_mismatch_names_the_parameter(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.call("pretrain", "--config", write_config(tmp), "--out", tmp)
            wider = write_config(tmp, backbone_b={"d_model": 12})
            with self.assertRaisesMessage(CommandError, "tower B: parameter"):
                self.call("train", "--config", wider, "--out", tmp, "--from", str(Path(tmp) / "tower_b.ckpt"))

    def test_ablate(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.call("ablate", "input_proj_text", "--config", write_config(tmp), "--out", tmp)
            frame = pd.read_csv(Path(tmp) / "ablation_input_proj_text.csv")
            self.assertEqual(frame["variant"].tolist(), ["with", "without"])


class SweepCommandTest(TestCase):
    def test_sweep_writes_csv_and_cells(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = StringIO()
            call_command("sweep", "--config", write_config(tmp), "--out", tmp, "--run", "cmd", "--plot", stdout=out)
            frame = pd.read_csv(Path(tmp) / "sweep.csv")
            self.assertEqual(len(frame), 1)
            self.assertEqual(frame["kind"].tolist(), [ZIPPER])
            self.assertTrue((Path(tmp) / "sweep.png").exists())
            self.assertEqual(SweepCell.objects.filter(run="cmd").count(), 1)


### DESK-SCALE LEARNING RUNS

@unittest.skipUnless(settings.ZIPPER_SLOW_TESTS, "long seeded desk-scale training runs")
class DeskScaleTest(SimpleTestCase):
    """Default configuration: 4-layer d=64 towers, speech tower pre-trained on 50k unpaired sentences."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.experiment = load_config().with_output_dir(cls.tmp.name)
        cls.tower_paths = run_pretrain(cls.experiment)
        cls.towers = load_tower_states(cls.tower_paths)
        cls.corpus = build_corpus(cls.experiment.corpus, unpaired=False)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def experiment_in(self, name):
        return self.experiment.with_output_dir(Path(self.tmp.name) / name)

    def clean_asr_wer(self, model):
        report = evaluate_task(model, self.corpus.heldout_clean, Task.ASR, self.experiment.eval, "heldout_clean",
                               self.corpus.codebook)
        return report.wer

    def test_zipper_learns_asr_on_full_data(self):
        experiment = self.experiment_in("zipper")
        path, trainer = run_train(experiment, ZIPPER, self.tower_paths)
        smoothed = moving_average(trainer.losses[:200], 20)
        self.assertLess(smoothed[-1], smoothed[0])
        model, _, _, _ = load_model(path)
        self.assertLessEqual(self.clean_asr_wer(model), 0.05)
        prompt = build_prompt("hello world", Modality.B, experiment)
        result = generate(model, prompt, DecodePlan((Modality.A,), max_tokens=48))
        self.assertEqual(result.decoded(), "hello world")

    def test_baseline_learns_asr_on_full_data(self):
        path, _ = run_train(self.experiment_in("baseline"), SINGLE_DECODER, self.tower_paths)
        model, _, _, _ = load_model(path)
        self.assertLessEqual(self.clean_asr_wer(model), 0.05)

    def test_zipper_beats_baseline_with_scarce_pairs(self):
        result = run_data_fraction_sweep(self.experiment, fractions=(0.01, 0.1), kinds=(ZIPPER, SINGLE_DECODER),
                                         seeds=(0, 1, 2), towers=self.towers)
        self.assertLess(result.median_wer(ZIPPER, 0.01), result.median_wer(SINGLE_DECODER, 0.01))
        self.assertLess(result.median_wer(ZIPPER, 0.1, "tts_wer"), result.median_wer(SINGLE_DECODER, 0.1, "tts_wer"))

    def test_cross_attention_is_the_only_cross_modal_channel(self):
        frame = run_ablation(self.experiment, N_CROSS_LAYERS, seeds=(0,), n_zips_grid=(0, 4), towers=self.towers)
        wer = dict(zip(frame["variant"], frame["asr_wer"]))
        self.assertGreaterEqual(wer["n_zips=0"], 0.5)
        self.assertLessEqual(wer["n_zips=4"], 0.05)
