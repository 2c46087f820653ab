"""
Línea de comandos del toolkit: generación del dataset, render de escenas,
evaluación, demo de decodificación, sesión interactiva y detector KnowNo.

Uso: python ambres.py <subcomando> [opciones]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Callable, Optional, Sequence, TextIO, Tuple

from services.config import get_settings_from_env
from services.dataset_service import DatasetConfig, generate_dataset, read_dataset, write_dataset
from services.decoder import (
    DecodePolicy,
    GREEDY,
    PromptContext,
    decode_schema,
    default_vocabulary,
    http_backend,
    mock_backend,
    temperature,
)
from services.errors import AmbresError
from services.eval_service import aggregate, noisy_wrapper, run_split, write_report
from services.reasoning_service import (
    DecoderReasoner,
    FixedOptionScorer,
    InteractiveUser,
    OracleReasoner,
    knowno_baseline,
    save_transcripts,
    softmax,
    run_episode,
)
from services.schema_compiler import load_schema_arg
from services.sim_world import Scene, TaskInstance, render_scene

logger = logging.getLogger(__name__)


# ==========================
# Backends: oracle | mock:<seed> | noisy:<p> | http:<url>
# ==========================

def backend_spec(text: str) -> Tuple[str, str]:
    kind, _, arg = text.partition(":")
    if kind == "oracle" and not arg:
        return kind, ""
    if kind == "mock":
        if arg:
            try:
                int(arg)
            except ValueError:
                raise argparse.ArgumentTypeError(f"Semilla inválida en '{text}'")
        return kind, arg
    if kind == "noisy":
        try:
            p = float(arg)
        except ValueError:
            raise argparse.ArgumentTypeError(f"Probabilidad inválida en '{text}'")
        if not 0.0 <= p <= 1.0:
            raise argparse.ArgumentTypeError(f"La probabilidad debe estar en [0, 1]: '{text}'")
        return kind, arg
    if kind == "http" and arg:
        # admite tanto http:<url> como una URL http://... directa
        return kind, (text if arg.startswith("//") else arg)
    raise argparse.ArgumentTypeError(f"Backend desconocido: '{text}' (oracle, mock:<seed>, noisy:<p>, http:<url>)")


def reasoner_factory(spec: Tuple[str, str], seed: int) -> Callable[[Scene, TaskInstance], Any]:
    kind, arg = spec
    if kind == "oracle":
        return lambda scene, task: OracleReasoner(scene, task)
    if kind == "noisy":
        p = float(arg)
        return lambda scene, task: noisy_wrapper(OracleReasoner(scene, task), p, seed)
    if kind == "mock":
        backend = mock_backend(int(arg) if arg else seed)
    else:
        backend = http_backend(arg)
    return lambda scene, task: DecoderReasoner(backend)


# ==========================
# Subcomandos
# ==========================

def cmd_gen(args: argparse.Namespace, out: TextIO) -> int:
    config = DatasetConfig(
        n_scenes=args.scenes,
        tasks_per_scene=args.tasks_per_scene,
        master_seed=args.seed,
    )
    ds = write_dataset(generate_dataset(config, jobs=args.jobs), args.out)
    counts = ds.manifest["counts"]
    print(f"[+] {counts['scenes']} escenas, {counts['tasks']} tareas ({counts['ambiguous']} ambiguas) en {args.out}", file=out)
    print(f"[i] checksum {ds.checksum}", file=out)
    return 0


def cmd_render(args: argparse.Namespace, out: TextIO) -> int:
    with open(args.scene, "r", encoding="utf-8") as f:
        try:
            scene = Scene.from_json(json.load(f))
        except json.JSONDecodeError as exc:
            print(f"[ERROR] JSON inválido en {args.scene}: {exc}", file=out)
            return 1
        except KeyError as exc:
            print(f"[ERROR] Falta el campo {exc} en {args.scene}", file=out)
            return 1
        except (TypeError, ValueError) as exc:
            print(f"[ERROR] Escena inválida en {args.scene}: {exc}", file=out)
            return 1
    render_scene(scene).save(args.out, format="PNG")
    print(f"[+] {scene.scene_id} -> {args.out}", file=out)
    return 0


def cmd_eval(args: argparse.Namespace, out: TextIO) -> int:
    ds = read_dataset(args.dataset)
    kind, arg = args.backend
    condition = args.condition or (f"{kind}:{arg}" if arg else kind)
    if args.fewshot:
        condition = f"{condition}-fewshot"
    transcripts = run_split(
        ds, reasoner_factory(args.backend, args.seed), split=args.split, jobs=args.jobs, fewshot=args.fewshot
    )
    if args.transcripts:
        save_transcripts(args.transcripts, transcripts)
    report = aggregate(transcripts, ds, condition, args.denominator)
    tabla = write_report([report], args.report, args.xlsx)
    print(tabla, file=out)
    avisos = sum(len(t.warnings) for t in transcripts)
    if avisos:
        print(f"[WARN] {avisos} advertencias registradas en las transcripciones", file=out)
    return 0


def cmd_decode(args: argparse.Namespace, out: TextIO) -> int:
    kind, arg = args.backend
    if kind == "mock":
        backend = mock_backend(int(arg) if arg else args.seed)
    elif kind == "http":
        backend = http_backend(arg)
    else:
        print("[ERROR] decode requiere un backend mock:<seed> o http:<url>", file=out)
        return 2
    policy: DecodePolicy = GREEDY if args.temperature is None else temperature(args.temperature, args.seed)
    schema = load_schema_arg(args.schema)
    ctx = PromptContext(prompt_text=f"Generate a value for the schema '{args.schema}'.")
    result = decode_schema(schema, backend, default_vocabulary(), policy, args.max_tokens, ctx)
    print(result.text, file=out)
    if not result.complete:
        print(f"[WARN] salida truncada tras {result.steps} pasos", file=out)
    return 0


def cmd_interact(args: argparse.Namespace, out: TextIO, stdin: TextIO) -> int:
    ds = read_dataset(args.dataset)
    task = ds.task_by_id(args.task)
    if task is None:
        print(f"[ERROR] No existe la tarea {args.task}", file=out)
        return 1
    scene = ds.scene_by_id(task.scene_id)
    reasoner = reasoner_factory(args.backend, args.seed)(scene, task)

    def mostrar(stage: str, value: Any) -> None:
        if stage == "grounding":
            print(f"[i] Objetos: {', '.join(value) or '-'}", file=out)
        elif stage == "classification":
            estado = "ambigua" if value.ambiguous else "clara"
            print(f"[i] Tarea {estado}: {value.explanation}", file=out)
        elif stage == "resolution":
            print(f"[+] Resuelto: {', '.join(value) or '-'}", file=out)
        elif stage == "localization":
            print(f"[+] Puntos: {' '.join(f'({x}, {y})' for x, y in value) or '-'}", file=out)

    print(f"[i] {task.task_id}: {task.text}", file=out)
    transcript = run_episode(
        reasoner,
        InteractiveUser(stdin=stdin, stdout=out),
        task,
        scene,
        image_ref=ds.image_ref(scene.scene_id),
        observer=mostrar,
    )
    for aviso in transcript.warnings:
        print(f"[WARN] {aviso}", file=out)
    return 0


def cmd_knowno(args: argparse.Namespace, out: TextIO) -> int:
    probs = softmax(args.scores)
    for label, opt, p in zip("ABCD", args.options, probs):
        print(f"{label}) {opt}  p={p:.3f}", file=out)
    ambiguous = knowno_baseline(FixedOptionScorer(args.scores), "", args.options, args.threshold)
    print(f"ambiguous: {'true' if ambiguous else 'false'}", file=out)
    return 0


# ==========================
# Parser
# ==========================

def build_parser() -> argparse.ArgumentParser:
    settings = get_settings_from_env()
    parser = argparse.ArgumentParser(prog="ambres", description="Toolkit de resolución de ambigüedad en tareas")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="Genera el dataset simulado")
    p.add_argument("--scenes", type=int, default=40)
    p.add_argument("--tasks-per-scene", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="Renderiza una escena JSON a PNG")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="Evalúa un backend sobre un split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", required=True, type=backend_spec)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fewshot", type=int, choices=[0, 1, 2], default=0)
    p.add_argument("--condition", default=None)
    p.add_argument("--denominator", choices=["ambiguous", "all"], default="ambiguous")
    p.add_argument("--xlsx", default=None)
    p.add_argument("--transcripts", default=None)

    p = sub.add_parser("decode", help="Decodifica un valor bajo un esquema")
    p.add_argument("--schema", required=True)
    p.add_argument("--backend", required=True, type=backend_spec)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-tokens", type=int, default=settings.max_tokens)
    p.add_argument("--temperature", type=float, default=None)

    p = sub.add_parser("interact", help="Sesión interactiva de aclaración")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--backend", required=True, type=backend_spec)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("knowno", help="Detector KnowNo sobre puntajes dados")
    p.add_argument("--options", nargs=4, required=True)
    p.add_argument("--scores", nargs=4, type=float, required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None) -> int:
    out = stdout or sys.stdout
    settings = get_settings_from_env()
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.WARNING))

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    print(f"[seed] {args.seed}", file=out)
    try:
        if args.cmd == "gen":
            return cmd_gen(args, out)
        if args.cmd == "render":
            return cmd_render(args, out)
        if args.cmd == "eval":
            return cmd_eval(args, out)
        if args.cmd == "decode":
            return cmd_decode(args, out)
        if args.cmd == "interact":
            return cmd_interact(args, out, stdin or sys.stdin)
        if args.cmd == "knowno":
            return cmd_knowno(args, out)
    except AmbresError as exc:
        print(f"[ERROR] {type(exc).__name__}: {exc}", file=out)
        return 1
    except OSError as exc:
        print(f"[ERROR] {exc}", file=out)
        return 1
    except ValueError as exc:
        # parámetros fuera de rango (config, temperatura, max-tokens)
        print(f"[ERROR] {exc}", file=out)
        return 2
    return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
