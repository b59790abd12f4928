"""
コマンドラインインターフェース
analyze / simulate / verify / transform サブコマンド
"""
import csv
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .analytic import AnalyticProfile, NoStationaryDistributionError, Recurrence
from .coefficients import DomainError, DomainKind, validate
from .config import GridSpec, OutputSpec, RunConfig, Scheme, SimConfig, load_run_config
from .logger import configure_run_logger, run_logger
from .simulator import run_ensemble
from .transforms import ExtensionMode, check_extended, extend
from .verify import DEFAULT_KS_THRESHOLD, verify_stationarity

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2

DEFAULT_GRID_COUNT = 401

# 負の値 (例: --grid -1:5:7) を取りうるオプション
SIGNED_VALUE_OPTIONS = ("--grid", "--x0")


class UsageError(Exception):
    """終了コード 2 で報告する入力エラー"""


def format_number(value: Any) -> str:
    """CSV 用: 浮動小数点は 17 桁 (往復可能) で書く"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def jsonable(value: Any) -> Any:
    """JSON にできない inf / nan を文字列にする"""
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def write_json(path: str, data: Dict[str, Any]):
    Path(path).write_text(json.dumps(jsonable(data), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])


def join_signed_values(argv: Sequence[str]) -> List[str]:
    """`--grid -1:5:7` を `--grid=-1:5:7` に書き換える

    argparse は `-` で始まる値をオプションとみなすため
    """
    joined = []
    tokens = list(argv)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token in SIGNED_VALUE_OPTIONS and i + 1 < len(tokens) and tokens[i + 1].startswith("-") \
                and not tokens[i + 1].startswith("--"):
            joined.append(f"{token}={tokens[i + 1]}")
            i += 2
            continue
        joined.append(token)
        i += 1
    return joined


def build_parser():
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="係数場 (または実行設定) の JSON ファイル")
    common.add_argument("--seed", type=int, help="乱数シード")
    common.add_argument("--threads", type=int, help="ワーカースレッド数の上限 (REFDIFF_THREADS を上書き)")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--paths", type=int, help="経路数")
    sim.add_argument("--dt", type=float, help="時間刻み")
    sim.add_argument("--horizon", type=float, help="シミュレーション時間")
    sim.add_argument("--burn-in", type=float, dest="burn_in", help="バーンイン時間")
    sim.add_argument("--scheme", choices=[s.value for s in Scheme], help="離散化スキーム")
    sim.add_argument("--explosion-bound", type=float, dest="explosion_bound", help="爆発判定の閾値")
    sim.add_argument("--progress", action="store_true", help="進捗バーを表示する")

    parser = argparse.ArgumentParser(prog="refdiff", description="反射拡散過程ツール")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="定常分布・スケール関数を解析する")
    p.add_argument("--grid", help="評価格子 min:max:count")
    p.add_argument("--report", help="JSON レポートの出力先")
    p.add_argument("--out", help="CSV 表 (x, beta, eta, h, cdf) の出力先")

    p = sub.add_parser("simulate", parents=[common, sim], help="反射経路をシミュレーションする")
    p.add_argument("--x0", type=float, help="初期状態 (省略時は定常分布から)")
    p.add_argument("--out", help="経路ごとの終点 CSV の出力先")
    p.add_argument("--trajectory", help="経路全体 (path, time, z, y_net) の CSV 出力先")
    p.add_argument("--dump-paths", type=int, default=1, dest="dump_paths",
                   help="--trajectory に書き出す経路数 (デフォルト: 1)")

    p = sub.add_parser("verify", parents=[common, sim], help="定常分布とレギュレータを検証する")
    p.add_argument("--report", help="JSON レポートの出力先")
    p.add_argument("--hist", help="ヒストグラムと解析密度の CSV 出力先")
    p.add_argument("--ks-threshold", type=float, default=DEFAULT_KS_THRESHOLD, dest="ks_threshold",
                   help=f"KS 距離の上限 (デフォルト: {DEFAULT_KS_THRESHOLD})")
    p.add_argument("--epsilon", type=float, help="局所時間の窓幅 (省略時は 5·σ·√dt)")

    p = sub.add_parser("transform", parents=[common], help="駆動係数 (対称化 / 折り返し) を出力する")
    p.add_argument("--grid", help="評価格子 min:max:count")
    p.add_argument("--dump", help="CSV (x, b, sigma, beta) の出力先")
    p.add_argument("--report", help="JSON レポートの出力先")
    return parser


def _sim_config(config: RunConfig, args) -> SimConfig:
    updates = {}
    for name, key in (("seed", "seed"), ("paths", "path_count"), ("dt", "dt"), ("horizon", "horizon"),
                      ("burn_in", "burn_in"), ("scheme", "scheme"), ("explosion_bound", "explosion_bound"),
                      ("x0", "x0")):
        value = getattr(args, name, None)
        if value is not None:
            updates[key] = value
    try:
        return SimConfig.model_validate({**config.sim.model_dump(), **updates})
    except ValidationError as e:
        raise UsageError(f"シミュレーション設定が不正です: {e}")


def _grid(config: RunConfig, args) -> Optional[GridSpec]:
    text = getattr(args, "grid", None)
    if text is None:
        return config.grid
    try:
        return GridSpec.parse(text)
    except (ValueError, ValidationError) as e:
        raise UsageError(f"--grid が不正です: {e}")


def _outputs(config: RunConfig, args) -> OutputSpec:
    outputs = OutputSpec(
        report=getattr(args, "report", None) or config.outputs.report,
        csv=getattr(args, "out", None) or getattr(args, "dump", None) or config.outputs.csv,
        hist=getattr(args, "hist", None) or config.outputs.hist,
        trajectory=getattr(args, "trajectory", None) or config.outputs.trajectory,
    )
    problems = outputs.unwritable()
    if problems:
        raise UsageError(f"出力先に書き込めません: {', '.join(problems)}")
    return outputs


def _number_or_none(fn, x):
    try:
        return float(fn(x))
    except (NoStationaryDistributionError, DomainError):
        return None


def command_analyze(config: RunConfig, args) -> int:
    field = config.field
    profile = AnalyticProfile(field)
    outputs = _outputs(config, args)
    grid = _grid(config, args)

    report: Dict[str, Any] = {
        "domain": field.domain.kind.value,
        "recurrence": profile.recurrence.value,
        "positive_recurrent": profile.positive_recurrent,
        "eta_infinity": profile.eta_infinity,
    }
    if profile.recurrence == Recurrence.RECURRENT:
        report["C"] = profile.normalizing_constant()
    if profile.positive_recurrent and field.domain.kind != DomainKind.FULL_LINE:
        expectations = profile.regulator_expectations()
        report["ey0"] = expectations.ey0
        if expectations.eya is not None:
            report["eya"] = expectations.eya

    print(f"定義域: {report['domain']}")
    print(f"再帰性: {report['recurrence']}")
    if "C" in report:
        print(f"正規化定数 C: {report['C']!r}")
    if "ey0" in report:
        print(f"E[Y0(1)]: {report['ey0']!r}")
    if "eya" in report:
        print(f"E[Ya(1)]: {report['eya']!r}")

    if outputs.report:
        write_json(outputs.report, report)
        print(f"レポートを保存しました: {outputs.report}")

    if outputs.csv:
        if grid is None:
            raise UsageError("--out には --grid が必要です")
        xs = grid.points()
        inside = field.domain.contains(xs)
        if not np.all(inside):
            run_logger.log_app("warning", f"skipping {int((~inside).sum())} grid points outside the domain")
        rows = []
        for x in xs[inside]:
            rows.append((
                x,
                float(field.beta(x)),
                float(profile.scale_function(x)),
                _number_or_none(profile.stationary_density, x),
                _number_or_none(profile.stationary_cdf, x),
            ))
        write_csv(outputs.csv, ("x", "beta", "eta", "h", "cdf"), rows)
        print(f"表を保存しました: {outputs.csv}")
    return EXIT_OK


def command_simulate(config: RunConfig, args) -> int:
    field = config.field
    sim = _sim_config(config, args)
    outputs = _outputs(config, args)
    keep = args.dump_paths if outputs.trajectory else 0

    ensemble = run_ensemble(field, sim, keep_paths=keep, progress=args.progress)
    endpoints = ensemble.endpoints()
    print(f"経路数: {sim.path_count} (爆発: {ensemble.exploded_count})")
    if endpoints.size:
        print(f"終点の平均: {float(endpoints.mean())!r}")

    if outputs.csv:
        write_csv(outputs.csv, ("path", "z0", "z_end", "y_end", "exploded", "explosion_time"),
                  ((s.index, s.z0, s.z_end, s.y_end, s.exploded, s.explosion_time) for s in ensemble.summaries))
        print(f"終点を保存しました: {outputs.csv}")

    if outputs.trajectory:
        rows = []
        for path in ensemble.paths:
            y = path.y_net if path.y_net is not None else [None] * len(path.z)
            rows.extend((path.rng_stream, t, z, yv) for t, z, yv in zip(path.times, path.z, y))
        write_csv(outputs.trajectory, ("path", "time", "z", "y_net"), rows)
        print(f"経路を保存しました: {outputs.trajectory}")

    args.metrics = {"path_count": sim.path_count, "seed": sim.seed}
    return EXIT_OK


def command_verify(config: RunConfig, args) -> int:
    field = config.field
    sim = _sim_config(config, args)
    outputs = _outputs(config, args)

    report = verify_stationarity(field, sim, ks_threshold=args.ks_threshold, epsilon=args.epsilon,
                                 progress=args.progress)

    print(f"KS 距離: {report.ks_distance!r} (上限 {report.ks_threshold})")
    for estimate in report.regulator_estimates:
        print(f"レギュレータ [{estimate.boundary}, {estimate.method}]: "
              f"{estimate.mean!r} ± {estimate.standard_error!r} "
              f"(目標 {estimate.target!r}, z = {estimate.z_score:.2f})")
    for check in report.localtime_checks:
        print(f"局所時間 [{check.name}]: {check.estimate!r} (許容 {check.tolerance!r}, z = {check.z_score:.2f})")
    if report.ratio_check is not None:
        ratio = report.ratio_check
        print(f"比 E[Ya]/E[Y0]: {ratio.estimate!r} (目標 {ratio.target!r}, z = {ratio.z_score:.2f})")
    print("検証成功" if report.passed else "検証失敗")

    if outputs.report:
        write_json(outputs.report, report.model_dump(mode="json"))
        print(f"レポートを保存しました: {outputs.report}")
    if outputs.hist:
        write_csv(outputs.hist, ("lower", "upper", "empirical_density", "analytic_density"),
                  ((r.lower, r.upper, r.empirical_density, r.analytic_density) for r in report.histogram))
        print(f"ヒストグラムを保存しました: {outputs.hist}")

    args.metrics = {"path_count": sim.path_count, "seed": sim.seed,
                    "ks_distance": report.ks_distance, "passed": report.passed}
    return EXIT_OK if report.passed else EXIT_INVALID


def command_transform(config: RunConfig, args) -> int:
    field = config.field
    try:
        ext = extend(field)
    except DomainError as e:
        raise UsageError(str(e))
    outputs = _outputs(config, args)

    grid = _grid(config, args)
    if grid is None:
        if ext.mode == ExtensionMode.SYMMETRIZED:
            breaks = [abs(s.upper) for s in field.segments if math.isfinite(s.upper)]
            reach = 2.0 * max(breaks, default=2.0)
            grid = GridSpec(min=-reach, max=reach, count=DEFAULT_GRID_COUNT)
        else:
            grid = GridSpec(min=-field.domain.a, max=3.0 * field.domain.a, count=DEFAULT_GRID_COUNT)
    xs = grid.points()

    check = check_extended(ext, xs)
    driver = AnalyticProfile(ext.to_full_line())
    report = {
        "mode": ext.mode.value,
        "a": ext.a,
        "driver_recurrence": driver.recurrence.value,
        "violations": [v.message for v in check.violations],
    }
    print(f"変換: {ext.mode.value}")
    print(f"駆動過程の再帰性: {driver.recurrence.value}")
    for message in report["violations"]:
        print(f"違反: {message}")

    if outputs.csv:
        drift, vol = ext.coefficients(xs)
        # -0 を 0 として書く
        drift = drift + 0.0
        write_csv(outputs.csv, ("x", "b", "sigma", "beta"),
                  zip(xs, drift, vol, 2.0 * drift / vol ** 2 + 0.0))
        print(f"係数表を保存しました: {outputs.csv}")
    if outputs.report:
        write_json(outputs.report, report)
        print(f"レポートを保存しました: {outputs.report}")
    return EXIT_OK if check.ok else EXIT_INVALID


COMMANDS = {
    "analyze": command_analyze,
    "simulate": command_simulate,
    "verify": command_verify,
    "transform": command_transform,
}


def run(argv: Optional[List[str]] = None) -> int:
    """CLI を実行して終了コードを返す"""
    configure_run_logger()
    parser = build_parser()
    try:
        args = parser.parse_args(join_signed_values(sys.argv[1:] if argv is None else argv))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    if args.threads is not None:
        if args.threads < 1:
            print("エラー: --threads は 1 以上を指定してください", file=sys.stderr)
            return EXIT_USAGE
        os.environ["REFDIFF_THREADS"] = str(args.threads)

    start = time.perf_counter()
    args.metrics = {}
    status = "completed"
    error_message = None
    try:
        if not os.path.exists(args.config):
            raise UsageError(f"設定ファイルが見つかりません: {args.config}")
        try:
            config = load_run_config(args.config)
        except json.JSONDecodeError as e:
            raise UsageError(f"JSON の解析に失敗しました: {args.config}:{e.lineno}:{e.colno}: {e.msg}")
        except ValidationError as e:
            raise UsageError(f"設定の形式が不正です: {args.config}\n{e}")

        report = validate(config.field)
        if not report.ok:
            status = "invalid"
            error_message = "; ".join(report.messages())
            print("エラー: 係数場が条件を満たしていません", file=sys.stderr)
            for violation in report.violations:
                print(f"  - {violation.message}", file=sys.stderr)
            code = EXIT_INVALID
        else:
            code = COMMANDS[args.command](config, args)
            if code != EXIT_OK:
                status = "failed"
    except UsageError as e:
        status = "usage_error"
        error_message = str(e)
        print(f"エラー: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except DomainError as e:
        status = "usage_error"
        error_message = str(e)
        print(f"エラー: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except NoStationaryDistributionError as e:
        status = "invalid"
        error_message = str(e)
        print(f"エラー: {e}", file=sys.stderr)
        code = EXIT_INVALID

    run_logger.log_run(
        subcommand=args.command,
        config_path=args.config,
        status=status,
        seed=args.metrics.get("seed", args.seed),
        processing_time=time.perf_counter() - start,
        path_count=args.metrics.get("path_count"),
        ks_distance=args.metrics.get("ks_distance"),
        passed=args.metrics.get("passed"),
        error_message=error_message,
    )
    return code


def main():
    """コマンドラインエントリーポイント"""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
