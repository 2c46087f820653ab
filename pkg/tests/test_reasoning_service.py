from __future__ import annotations

import io
import json

import numpy as np
import pytest

from services.decoder import mock_backend
from services.errors import (
    CardinalityMismatch,
    OutOfBounds,
    PreconditionViolation,
    ReasonerFailure,
    UnresolvedAmbiguity,
)
from services.reasoning_service import (
    AMBIGUITY_SCHEMA,
    GROUNDING_SCHEMA,
    AmbiguityVerdict,
    DecoderReasoner,
    FixedOptionScorer,
    InteractiveUser,
    OracleOptionScorer,
    OracleReasoner,
    ScriptedReasoner,
    SimulatedUser,
    build_prompt,
    classify_ambiguity,
    emit_through_decoder,
    ground_task_objects,
    knowno_baseline,
    knowno_candidates,
    knowno_from_scores,
    load_transcripts,
    locate_objects,
    resolve,
    run_episode,
    save_transcripts,
    simulate_user_answer,
)
from services.schema_compiler import BooleanNode
from services.sim_world import (
    GRID,
    ReferringExpression,
    Scene,
    SceneObject,
    TaskInstance,
    match_expression,
    object_center,
    parse_description,
    render_task_text,
)

CLEAR = AmbiguityVerdict(False, "Each object in the task is uniquely identified.", "")


def _pick(scene: Scene, expr: ReferringExpression, intended: str) -> TaskInstance:
    return TaskInstance(
        task_id=f"{scene.scene_id}-pick",
        scene_id=scene.scene_id,
        template="pick",
        text=render_task_text("pick", (expr,)),
        referents=(expr,),
        intended=(intended,),
        ambiguous=False,
        split="test",
    )


@pytest.fixture
def cup_scene() -> Scene:
    return Scene("cups", GRID, (
        SceneObject("c1", "cup", "blue", (0, 1)),
        SceneObject("c2", "cup", "yellow", (3, 1)),
        SceneObject("t", "tray", "orange", (5, 2)),
    ), 0)


@pytest.fixture
def cup_task() -> TaskInstance:
    refs = (ReferringExpression("cup"), ReferringExpression("tray"))
    return TaskInstance("cups-t00", "cups", "stack", "place the cup on the tray", refs, ("c1", "t"), True, "test")


class TestGrounding:
    def test_oracle_blue_block(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block", "blue"), "o0")
        r = OracleReasoner(three_object_scene, task)
        assert ground_task_objects(r, None, task.text) == ["blue block"]

    def test_oracle_attribute_free(self, three_object_scene):
        refs = (ReferringExpression("block"), ReferringExpression("bowl"))
        task = TaskInstance("t3-mv", "t3", "move_to", render_task_text("move_to", refs), refs, ("o0", "o2"), True, "test")
        assert task.text == "put the block in the bowl"
        assert ground_task_objects(OracleReasoner(three_object_scene, task), None, task.text) == ["block", "bowl"]

    def test_scripted_empty_array(self):
        assert ground_task_objects(ScriptedReasoner({"grounding": "[]"}), None, "") == []

    def test_scripted_output_is_normalized(self):
        r = ScriptedReasoner({"grounding": '[" Blue  Block", "blue block", "bowl"]'})
        assert ground_task_objects(r, None, "x") == ["blue block", "bowl"]

    def test_invalid_scripted_output(self):
        with pytest.raises(ReasonerFailure):
            ground_task_objects(ScriptedReasoner({"grounding": "blue block"}), None, "x")

    def test_oracle_rejects_foreign_task(self, three_object_scene, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("block"), "a")
        with pytest.raises(PreconditionViolation):
            OracleReasoner(three_object_scene, task)


class TestClassification:
    def test_oracle_ambiguous(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block"), "o0")
        verdict = classify_ambiguity(OracleReasoner(three_object_scene, task), None, task.text, ["block"])
        assert verdict.ambiguous is True
        assert "block" in verdict.clarifying_question
        assert verdict.explanation == "The block matches 2 objects in the scene: blue block, red block."

    def test_oracle_clear(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("bowl"), "o2")
        verdict = classify_ambiguity(OracleReasoner(three_object_scene, task), None, task.text, ["bowl"])
        assert verdict.ambiguous is False
        assert verdict.clarifying_question == ""

    def test_oracle_outputs_are_schema_valid(self, small_dataset, conforms):
        for task in small_dataset.tasks:
            r = OracleReasoner(small_dataset.scene_by_id(task.scene_id), task)
            grounding = json.dumps(r.grounding_output(), separators=(", ", ": "))
            verdict = json.dumps(r.verdict_output().to_json(), separators=(", ", ": "))
            assert conforms(grounding, GROUNDING_SCHEMA)
            assert conforms(verdict, AMBIGUITY_SCHEMA)
            assert r.verdict_output().ambiguous == task.ambiguous

    def test_question_with_clear_verdict_is_a_warning(self, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("bowl"), "c")
        r = ScriptedReasoner({
            "grounding": '["bowl"]',
            "classification": '{"ambiguity": false, "explanation": "One bowl.", "clarifying_question": "Which bowl?"}',
            "localization": "(456, 368)",
        })
        transcript = run_episode(r, SimulatedUser(), task, two_blue_blocks_scene)
        assert any("clarifying_question" in w for w in transcript.warnings)
        assert transcript.points == [(456, 368)]


class TestSimulatedUser:
    def test_color_distinguishes(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block"), "o0")
        verdict = AmbiguityVerdict(True, "two blocks", "Which block do you mean?")
        assert simulate_user_answer(task, three_object_scene, verdict) == "the blue one"

    def test_ordinal_fallback(self, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("block"), "a")
        verdict = AmbiguityVerdict(True, "two blocks", "Which block do you mean?")
        assert simulate_user_answer(task, two_blue_blocks_scene, verdict) == "the leftmost one"

    def test_clear_verdict_is_a_precondition_violation(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("bowl"), "o2")
        with pytest.raises(PreconditionViolation):
            simulate_user_answer(task, three_object_scene, CLEAR)


class TestResolve:
    def test_color_answer(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block"), "o0")
        r = OracleReasoner(three_object_scene, task)
        verdict = r.verdict_output()
        out = resolve(r, None, task.text, verdict, "the blue one", ["block"], scene=three_object_scene)
        assert out == ["blue block"]

    def test_unambiguous_is_identity(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("bowl"), "o2")
        r = OracleReasoner(three_object_scene, task)
        assert resolve(r, None, task.text, CLEAR, None, ["bowl"]) == ["bowl"]

    def test_ordinal_answer(self, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("block", "blue"), "a")
        r = OracleReasoner(two_blue_blocks_scene, task)
        out = resolve(r, None, task.text, r.verdict_output(), "the leftmost one", ["blue block"], scene=two_blue_blocks_scene)
        assert out == ["leftmost blue block"]
        assert match_expression(parse_description(out[0]), two_blue_blocks_scene) == {"a"}

    def test_useless_answer_leaves_ambiguity(self, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("block"), "a")
        r = OracleReasoner(two_blue_blocks_scene, task)
        with pytest.raises(UnresolvedAmbiguity):
            resolve(r, None, task.text, r.verdict_output(), "no idea", ["block"], scene=two_blue_blocks_scene)

    def test_ambiguous_without_answer(self, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("block"), "a")
        r = OracleReasoner(two_blue_blocks_scene, task)
        with pytest.raises(PreconditionViolation):
            resolve(r, None, task.text, r.verdict_output(), None, ["block"])


class TestLocate:
    def test_single_point(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block", "blue"), "o0")
        r = OracleReasoner(three_object_scene, task)
        assert locate_objects(r, None, three_object_scene, ["blue block"]) == [(56, 80)]

    def test_two_points_in_order(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block", "blue"), "o0")
        r = OracleReasoner(three_object_scene, task)
        assert locate_objects(r, None, three_object_scene, ["red block", "blue block"]) == [(216, 176), (56, 80)]

    def test_oracle_point_goes_through_decoder(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block", "blue"), "o0")
        r = OracleReasoner(three_object_scene, task)
        assert locate_objects(r, None, None, ["blue block", "blue bowl"]) == [(56, 80), (376, 368)]

    def test_out_of_bounds(self, three_object_scene):
        r = ScriptedReasoner({"localization": "(600, 80)"})
        with pytest.raises(OutOfBounds):
            locate_objects(r, None, three_object_scene, ["blue block"])

    def test_cardinality(self, three_object_scene):
        r = ScriptedReasoner({"localization": "(1, 2)"})
        with pytest.raises(CardinalityMismatch):
            locate_objects(r, None, three_object_scene, ["blue block", "red block"])

    def test_nothing_to_locate(self, three_object_scene):
        assert locate_objects(ScriptedReasoner({}), None, three_object_scene, []) == []


class TestEpisode:
    def test_oracle_resolves_every_dataset_task(self, small_dataset):
        for task in small_dataset.tasks:
            scene = small_dataset.scene_by_id(task.scene_id)
            t = run_episode(OracleReasoner(scene, task), SimulatedUser(), task, scene)
            assert t.warnings == []
            assert t.verdict.ambiguous == task.ambiguous
            assert (t.user_answer is not None) == task.ambiguous
            ids = set()
            for desc in t.resolved:
                matched = match_expression(parse_description(desc), scene)
                assert len(matched) == 1
                ids |= matched
            assert ids == set(task.intended)
            assert t.points == [object_center(scene.get(i).cell) for i in task.intended]

    def test_scripted_misclassification_is_recorded(self, two_blue_blocks_scene):
        task = _pick(two_blue_blocks_scene, ReferringExpression("block"), "a")
        r = ScriptedReasoner({
            "grounding": '["block"]',
            "classification": '{"ambiguity": false, "explanation": "Looks clear.", "clarifying_question": ""}',
            "localization": "(136, 272)",
        })
        t = run_episode(r, SimulatedUser(), task, two_blue_blocks_scene)
        assert t.user_answer is None
        assert t.resolved == t.grounded == ["block"]
        assert any(w.startswith("UnresolvedAmbiguity") for w in t.warnings)

    def test_interactive_cup_on_tray(self, cup_scene, cup_task):
        stdin, stdout = io.StringIO("the blue one\n"), io.StringIO()
        stages = []
        t = run_episode(
            OracleReasoner(cup_scene, cup_task),
            InteractiveUser(stdin, stdout),
            cup_task,
            cup_scene,
            observer=lambda stage, value: stages.append(stage),
        )
        assert stdout.getvalue() == "[?] Which cup do you mean?\n> "
        assert t.user_answer == "the blue one"
        assert t.resolved == ["blue cup", "tray"]
        assert t.points == [object_center((0, 1)), object_center((5, 2))]
        assert stages == ["grounding", "classification", "resolution", "localization"]

    def test_decoder_reasoner_completes_on_mock(self, small_dataset, conforms):
        task = small_dataset.tasks[0]
        scene = small_dataset.scene_by_id(task.scene_id)
        t = run_episode(DecoderReasoner(mock_backend(4), max_tokens=4096), SimulatedUser(), task, scene)
        assert conforms(json.dumps(t.verdict.to_json()), AMBIGUITY_SCHEMA)
        assert set(t.timings) >= {"grounding", "classification", "localization"}

    def test_truncated_decoder_output_fails(self, small_dataset):
        task = small_dataset.tasks[0]
        scene = small_dataset.scene_by_id(task.scene_id)
        with pytest.raises(ReasonerFailure):
            run_episode(DecoderReasoner(mock_backend(4), max_tokens=1), SimulatedUser(), task, scene)

    def test_transcripts_round_trip(self, small_dataset, tmp_path):
        out = []
        for task in small_dataset.tasks[:5]:
            scene = small_dataset.scene_by_id(task.scene_id)
            out.append(run_episode(OracleReasoner(scene, task), SimulatedUser(), task, scene))
        path = str(tmp_path / "transcripts.jsonl")
        save_transcripts(path, out)
        assert load_transcripts(path) == out


class TestEmitThroughDecoder:
    def test_valid_text_passes(self):
        assert emit_through_decoder("true", BooleanNode()) == "true"
        assert emit_through_decoder("(1, 2) (3,4)") == "(1, 2) (3,4)"

    def test_invalid_text_fails(self):
        with pytest.raises(ReasonerFailure):
            emit_through_decoder("yes", BooleanNode())


class TestKnowNo:
    @pytest.mark.parametrize("probs,expected", [
        ([0.50, 0.45, 0.04, 0.01], True),
        ([0.97, 0.01, 0.01, 0.01], False),
        ([0.25, 0.25, 0.25, 0.25], False),
    ])
    def test_threshold_examples(self, probs, expected):
        scorer = FixedOptionScorer(np.log(probs))
        assert knowno_baseline(scorer, "pick up the block", ["a", "b", "c", "d"], 0.3) is expected
        assert knowno_from_scores(np.log(probs), 0.3) is expected

    def test_preconditions(self):
        scorer = FixedOptionScorer([0.0] * 4)
        with pytest.raises(PreconditionViolation):
            knowno_baseline(scorer, "x", ["a", "b", "c"], 0.3)
        with pytest.raises(PreconditionViolation):
            knowno_baseline(scorer, "x", ["a", "b", "c", "d"], 1.0)

    def test_candidates_from_scene(self, three_object_scene):
        task = _pick(three_object_scene, ReferringExpression("block"), "o0")
        assert knowno_candidates(task, three_object_scene) == [
            ("pick up the blue block", True),
            ("pick up the red block", True),
            ("pick up the blue bowl", False),
            ("ask for help", False),
        ]

    def test_oracle_scorer_flags_ambiguity(self, three_object_scene):
        ambiguous = _pick(three_object_scene, ReferringExpression("block"), "o0")
        clear = _pick(three_object_scene, ReferringExpression("bowl"), "o2")
        for task, expected in ((ambiguous, True), (clear, False)):
            options = [text for text, _ in knowno_candidates(task, three_object_scene)]
            scorer = OracleOptionScorer(task, three_object_scene)
            assert knowno_baseline(scorer, task.text, options, 0.3) is expected

    def test_decoder_reasoner_scores_label_tokens(self, vocab):
        r = DecoderReasoner(mock_backend(2))
        prompt = build_prompt("knowno", "pick up the block", options=["a", "b", "c", "d"])
        assert "A) a" in prompt and "D) d" in prompt
        assert knowno_baseline(r, "pick up the block", ["a", "b", "c", "d"], 0.3) in (True, False)
