"""Command-line entry point: ``epirenew {simulate,fit,summarize,validate} MANIFEST``.

Exit codes: 0 success, 1 usage error, 2 data validation failure, 3
convergence failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .delaydist import TruncationError
from .ingest import IngestError
from .pipeline import (
    ManifestError, assemble, describe, format_checks, load_manifest, load_truth,
    simulate_dataset, validate,
)
from .report import constrained_draws, emit_report
from .sampler import PosteriorDraws, SamplerError, diagnostics, run_chains

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3
DRAWS_FILE = "draws.csv"

log = logging.getLogger("epirenew")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epirenew", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, output=True):
        sp.add_argument("manifest", type=Path, help="run manifest (YAML)")
        if seed:
            sp.add_argument("--seed", type=int, help="override chains.seed")
        if output:
            sp.add_argument("--output", type=Path, help="override the output directory")

    sim = sub.add_parser("simulate", help="write a synthetic dataset under known parameters")
    common(sim)
    sim.add_argument("--truth", type=Path, required=True,
                     help="YAML/JSON mapping of true parameters")

    fit = sub.add_parser("fit", help="fit the model and write the report")
    common(fit)
    fit.add_argument("--chains", type=int, help="override chains.n_chains")
    fit.add_argument("--allow-nonconverged", action="store_true",
                     help="exit 0 even when R-hat flags parameters")
    fit.add_argument("--dry-run", action="store_true",
                     help="validate inputs and print model dimensions without sampling")
    fit.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    summ = sub.add_parser("summarize", help="rebuild the report from saved draws")
    common(summ, seed=False)
    summ.add_argument("--draws", type=Path, help=f"draws CSV (default <output>/{DRAWS_FILE})")
    summ.add_argument("--allow-nonconverged", action="store_true")
    summ.add_argument("--no-figures", action="store_true")

    val = sub.add_parser("validate", help="check inputs, pmfs and prior predictive sanity")
    common(val, output=False)
    return p


def _sampler_info(draws: PosteriorDraws) -> dict:
    info = {k: v for k, v in draws.info.items() if k != "config"}
    info["acceptance"] = draws.accept_rate
    return info


def _finish_report(asm, manifest, draws, output, seed, allow, figures, sampler=None) -> int:
    diag = diagnostics(draws)
    if sampler is not None:
        diag["sampler"] = sampler
    emit_report(asm.model, draws, output, as_of=manifest.as_of, diagnostics=diag,
                config=manifest.to_dict(), seed=seed, figures=figures)
    if not diag["converged"]:
        msg = (f"NOT CONVERGED: R-hat >= {diag['threshold']} for "
               f"{', '.join(diag['flagged'])} (max {diag['max_rhat']:.3f})")
        print(msg, file=sys.stderr)
        if not allow:
            return EXIT_CONVERGENCE
    print(f"report written to {output}")
    return EXIT_OK


def cmd_fit(args) -> int:
    manifest = load_manifest(args.manifest).with_overrides(
        seed=args.seed, chains=args.chains, output=args.output)
    asm = assemble(manifest)
    for note in asm.notices:
        log.warning(note)
    if args.dry_run:
        print("\n".join(describe(asm)))
        return EXIT_OK
    cfg = manifest.chains
    model = asm.model
    log.info("sampling %d chains of %d + %d iterations over %d parameters",
             cfg.n_chains, cfg.n_warmup, cfg.n_samples, model.dim)
    raw = run_chains(model.log_density, model.initial_point, cfg, names=model.layout.names(),
                     target=model.compiled_target())
    draws = constrained_draws(model, raw)
    out = Path(manifest.output)
    out.mkdir(parents=True, exist_ok=True)
    draws.to_csv(out / DRAWS_FILE)
    return _finish_report(asm, manifest, draws, out, cfg.seed, args.allow_nonconverged,
                          not args.no_figures, sampler=_sampler_info(raw))


def cmd_summarize(args) -> int:
    manifest = load_manifest(args.manifest).with_overrides(output=args.output)
    asm = assemble(manifest)
    out = Path(manifest.output)
    path = args.draws or out / DRAWS_FILE
    if not path.exists():
        raise FileNotFoundError(f"draws file not found: {path}")
    draws = PosteriorDraws.from_csv(path)
    if draws.names != asm.model.layout.names():
        raise IngestError(f"{path}: parameter columns do not match the manifest's model")
    return _finish_report(asm, manifest, draws, out, manifest.chains.seed,
                          args.allow_nonconverged, not args.no_figures)


def cmd_simulate(args) -> int:
    manifest = load_manifest(args.manifest)
    seed = args.seed if args.seed is not None else manifest.chains.seed
    output = args.output or manifest.output
    files = simulate_dataset(manifest, load_truth(args.truth), output, seed)
    for key, path in files.items():
        print(f"{key}: {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    seed = args.seed if args.seed is not None else manifest.chains.seed
    checks = validate(manifest, seed=seed)
    print(format_checks(checks))
    return EXIT_OK if all(c.ok for c in checks) else EXIT_DATA


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "summarize": cmd_summarize,
            "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IngestError, TruncationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SamplerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
