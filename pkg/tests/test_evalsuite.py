import numpy as np
import pytest

from tablebot.blockworld import TaskKind, TaskSpec, build_variations, generate_dataset, load_dataset
from tablebot.text import build_vocab
from tablebot.blockworld.tasks import template_corpus
from tablebot.encoder import EncoderConfig
from tablebot.policy import PolicyConfig
from tablebot.training import TrainConfig, train_bc
from tablebot.evalsuite import (
    ABLATION_AXES,
    AblationMatrix,
    EvalConfig,
    ResultRow,
    ResultTable,
    _cell_configs,
    emit_report,
    evaluate_policy,
    expert_as_policy,
    random_policy,
    reach_target_chance_rate,
    rollout_eval,
    split_variations,
)

VOCAB = build_vocab(template_corpus())
REACH = TaskSpec.of(TaskKind.REACH_TARGET)


@pytest.fixture(scope="module")
def reach_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("evaldata")
    variations, splits = build_variations(REACH, 2, seed=0)
    generate_dataset(REACH, variations, 5, 0, tmp, splits=splits)
    return load_dataset(tmp)


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, reach_dataset):
    tmp = tmp_path_factory.mktemp("ckpt")
    train = TrainConfig(iterations=30, batch_size=8, seed=0, checkpoint_every=0)
    _, _, ckpt = train_bc(reach_dataset.episodes, train,
                          EncoderConfig.from_preset("tiny"),
                          PolicyConfig(dim=32, heads=2), VOCAB, tmp)
    return ckpt


def test_expert_as_policy_is_perfect():
    for kind in TaskKind:
        task = TaskSpec.of(kind)
        variations, _ = build_variations(task, 2, seed=1)
        rate = evaluate_policy(expert_as_policy, task, list(enumerate(variations)),
                               episodes=20, seed=3)
        assert rate == 100.0, task.name


def test_random_policy_reach_chance_within_3_sigma():
    # Monte-Carlo vs the analytic half-ball washout volume, T=2 attempts
    variations, _ = build_variations(REACH, 2, seed=2)
    n = 1500
    rate = evaluate_policy(random_policy(0), REACH, list(enumerate(variations)),
                           episodes=n, seed=4) / 100.0
    p = reach_target_chance_rate()
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(rate - p) <= 3 * sigma + 1e-9


def test_evaluation_is_deterministic(tiny_ckpt, reach_dataset):
    cfg = EvalConfig(episodes=6, seeds=(0, 1))
    t1 = rollout_eval(tiny_ckpt, reach_dataset, cfg, VOCAB, "det")
    t2 = rollout_eval(tiny_ckpt, reach_dataset, cfg, VOCAB, "det")
    assert t1.rows[0].per_seed == t2.rows[0].per_seed


def test_eval_does_not_mutate_checkpoint_or_dataset(tiny_ckpt, reach_dataset):
    ckpt_before = tiny_ckpt.read_bytes()
    manifest_path = reach_dataset.root / "manifest.json"
    manifest_before = manifest_path.read_bytes()
    rollout_eval(tiny_ckpt, reach_dataset, EvalConfig(episodes=4, seeds=(0,)), VOCAB)
    assert tiny_ckpt.read_bytes() == ckpt_before
    assert manifest_path.read_bytes() == manifest_before


def test_eval_instruction_style_none_runs(tiny_ckpt, reach_dataset):
    cfg = EvalConfig(episodes=4, seeds=(0,), instruction_style="none")
    table = rollout_eval(tiny_ckpt, reach_dataset, cfg, VOCAB, "noinst")
    assert len(table.rows) == 1


def test_missing_split_raises(tiny_ckpt, reach_dataset):
    with pytest.raises(ValueError, match="unseen"):
        rollout_eval(tiny_ckpt, reach_dataset, EvalConfig(episodes=2, split="unseen"),
                     VOCAB)


def test_split_variations_filters(tmp_path):
    push = TaskSpec.of(TaskKind.PUSH_BUTTONS)
    variations, splits = build_variations(push, 3, seed=3, holdout_orderings=2,
                                          holdout_colors=1)
    generate_dataset(push, variations, 1, 0, tmp_path, splits=splits)
    ds = load_dataset(tmp_path)
    assert len(split_variations(ds, "seen")) == 3
    assert len(split_variations(ds, "unseen")) == 3  # 2 orderings + 1 color


def test_result_table_mean_equals_seed_mean():
    row = ResultRow(task="reach_target", condition="x", per_seed=[40.0, 60.0, 50.0],
                    episodes=10)
    assert row.mean == pytest.approx(50.0)


def test_emit_report_csv_and_markdown(tmp_path):
    table = ResultTable(rows=[
        ResultRow("reach_target", "context=4", [50.0, 60.0], 10),
        ResultRow("push_buttons", "context=4", [20.0, 30.0], 10),
    ])
    csv = emit_report(table, "csv", tmp_path / "r.csv")
    lines = csv.read_text().splitlines()
    assert lines[0] == "task,condition,mean_success,seed_successes,episodes"
    assert len(lines) == 3
    assert lines[1].startswith("push_buttons,context=4,25.00,20.00;30.00,10")
    md = emit_report(table, "markdown", tmp_path / "r.md")
    text = md.read_text()
    assert text.count("## ") == 2
    assert text.count("| context=4 |") == 2
    # identical tables produce identical bytes
    again = emit_report(table, "csv", tmp_path / "r2.csv")
    assert again.read_bytes() == csv.read_bytes()
    with pytest.raises(ValueError):
        emit_report(ResultTable(), "csv", tmp_path / "empty.csv")
    with pytest.raises(ValueError):
        emit_report(table, "yaml", tmp_path / "r.yaml")


def test_ablation_matrix_cells_and_configs():
    matrix = AblationMatrix()
    cells = matrix.cells()
    assert len(cells) == 3 + 4 + 5 + 2 + 2 + 4
    base_train = TrainConfig(iterations=1, batch_size=2)
    base_enc = EncoderConfig.from_preset("tiny")
    base_pol = PolicyConfig(dim=32, heads=2)
    for axis, value in cells:
        train_cfg, enc_cfg, pol_cfg = _cell_configs(
            axis, value, base_train, base_enc, base_pol, pretrain_ckpt="x.itrl"
        )
        assert pol_cfg.tokens == pol_cfg.context * (pol_cfg.cameras + 5)
        if axis == "encoder_preset":
            # the policy transformer stays fixed while the encoder scales
            assert pol_cfg.dim == base_pol.dim and pol_cfg.depth == base_pol.depth
    with pytest.raises(ValueError):
        AblationMatrix(axes={"bogus": (1,)}).cells()
    with pytest.raises(ValueError):
        _cell_configs("encoder_init", "pretrained", base_train, base_enc, base_pol, None)


def test_context_axis_expands_to_four_cells():
    matrix = AblationMatrix(axes={"context": ABLATION_AXES["context"]})
    assert [v for _, v in matrix.cells()] == [1, 2, 4, 8]
