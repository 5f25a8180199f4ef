import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError

from sltmpc_app.app_settings import sltmpc_setting
from sltmpc_app.config import config_from_dict, load_config
from sltmpc_app.exceptions import ConfigError, Infeasible, NotTwoDimensional, SltmpcError
from sltmpc_app.models import ExperimentRun
from sltmpc_app.mpc import METHODS, synthesize_tubes
from sltmpc_app.sim import compare_methods, roa_grid, simulate_closed_loop, tube_cost_study
from sltmpc_app.sldrs import set_recursion_gap, verify_containment
from sltmpc_app import reports

logger = logging.getLogger(__name__)

COMMANDS = ('synth-tubes', 'solve', 'simulate', 'roa', 'compare', 'verify')
EXIT_INFEASIBLE = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class Command(BaseCommand):
    help = 'Synthesize tubes, solve, simulate and compare tube MPC controllers from an experiment config'

    def add_arguments(self, parser):
        parser.add_argument('command', choices=COMMANDS, help='What to run')
        parser.add_argument('--config', default=None, help='Experiment config (JSON); the shipped default if omitted')
        parser.add_argument('--out', required=True, help='Directory receiving the result files')
        parser.add_argument('--seed', type=int, default=None, help='Override the simulation seed')
        parser.add_argument('--theta', type=float, default=None, help='Override the disturbance level')
        parser.add_argument('--method', choices=METHODS, default=None, help='Override the controller')
        parser.add_argument('--resolution', type=int, default=None, help='RoA grid points per axis')
        parser.add_argument('--workers', type=int, default=None, help='Worker processes for runs and grid points')
        parser.add_argument('--figures', action='store_true', help='Also write PNG figures')
        parser.add_argument('--all-costs', action='store_true',
                            help='synth-tubes: compare every tube cost kind')

    def handle(self, *args, **options):
        command = options['command']
        out_dir = Path(options['out'])
        config = None
        summary = {}
        exit_status = 0
        logger.info("sltmpc %s started (out=%s)", command, out_dir)
        try:
            config = load_config(options['config'])
            config = config_from_dict(config.with_overrides(
                seed=options['seed'], theta=options['theta'], method=options['method'],
                resolution=options['resolution']).as_dict())
            out_dir.mkdir(parents=True, exist_ok=True)
            handler = getattr(self, f"run_{command.replace('-', '_')}")
            summary = handler(config, out_dir, options)
        except Infeasible as exc:
            exit_status = EXIT_INFEASIBLE
            error = exc
        except ConfigError as exc:
            exit_status = EXIT_CONFIG
            error = exc
        except SltmpcError as exc:
            exit_status = EXIT_SOLVER
            error = exc
        except OSError as exc:
            exit_status = EXIT_CONFIG
            error = exc
        except (ValueError, ArithmeticError) as exc:
            exit_status = EXIT_SOLVER
            error = exc
        finally:
            self._record(command, config, out_dir, exit_status, summary)

        logger.info("sltmpc %s finished with exit status %d", command, exit_status)
        if exit_status:
            raise CommandError(f"{type(error).__name__}: {error}", returncode=exit_status)
        self.stdout.write(self.style.SUCCESS(f"{command} finished, results in {out_dir}"))

    def _record(self, command, config, out_dir, exit_status, summary):
        if not sltmpc_setting('RECORD_RUNS'):
            return
        try:
            ExperimentRun.objects.create(
                command=command,
                method=config.method if config else '',
                theta=config.theta if config else None,
                seed=config.simulation.seed if config else None,
                exit_status=exit_status,
                out_dir=str(out_dir),
                config=config.as_dict() if config else {},
                summary=reports.plain(summary or {}),
            )
        except DatabaseError as exc:
            logger.warning("Could not record the run: %s", exc)

    def _figure(self, plot, *args):
        try:
            path = plot(*args)
        except NotTwoDimensional as exc:
            self.stderr.write(self.style.WARNING(f"Figure skipped: {exc}"))
            return
        self.stdout.write(f"Wrote {path}")

    def _design(self, config, sys):
        design = synthesize_tubes(sys, config.N, config.tube_cost, config.rho_x, config.rho_u,
                                  weights=config.weights)
        self.stdout.write(f"Tubes ({config.tube_cost}): objective {design.objective:.6g} "
                          f"in {design.solve_ms:.1f} ms")
        return design

    # Commands

    def run_synth_tubes(self, config, out_dir, options):
        sys = config.build_system()
        design = self._design(config, sys)
        reports.write_tubes(out_dir, design.tubes, design.responses, {
            'theta': config.theta, 'cost_kind': design.kind, 'objective': design.objective,
            'fallback': design.fallback,
        })
        summary = {'objective': design.objective, 'cost_kind': design.kind}
        if options['all_costs']:
            table, _ = tube_cost_study(sys, config.N, rho_x=config.rho_x, rho_u=config.rho_u,
                                       weights=config.weights)
            reports.write_tube_costs(out_dir, table)
            for row in table.to_dict(orient='records'):
                if row['error']:
                    self.stderr.write(self.style.WARNING(f"{row['kind']}: {row['error']}"))
            summary['kinds'] = table['kind'].tolist()
        if options['figures']:
            self._figure(reports.plot_tubes, out_dir, design.tubes, design.responses, sys)
        return summary

    def run_solve(self, config, out_dir, options):
        sys = config.build_system()
        solution = config.make_controller(sys).solve(config.x0)
        reports.write_solution(out_dir, solution)
        self.stdout.write(f"{solution.method}: objective {solution.objective:.6g}, u0 = {solution.u0}")
        return {'objective': solution.objective}

    def run_simulate(self, config, out_dir, options):
        sys = config.build_system()
        controller = config.make_controller(sys)
        settings = config.simulation
        result = simulate_closed_loop(sys, controller, config.x0, settings.T, settings.n_runs,
                                      settings.disturbance_mode, settings.seed, workers=options['workers'])
        reports.write_trajectories(out_dir, result)
        reports.write_report(out_dir, [{
            'method': controller.method, 'theta': config.theta, 'coverage_pct': None,
            'mean_cost': result.mean_cost, 'std_cost': result.std_cost, 'mean_solve_ms': result.mean_solve_ms,
        }], extra={'simulation': result.summary()})
        if result.n_aborted:
            self.stderr.write(self.style.WARNING(f"{result.n_aborted} of {result.n_runs} runs aborted"))
        self.stdout.write(f"Mean closed-loop cost {result.mean_cost:.2f} +/- {result.std_cost:.2f}")
        if options['figures']:
            self._figure(reports.plot_trajectories, out_dir, result, sys)
        return result.summary()

    def run_roa(self, config, out_dir, options):
        sys = config.build_system()
        result = roa_grid(sys, lambda s: config.make_controller(s), config.roa.resolution,
                          workers=options['workers'], method=config.method)
        result.theta = config.theta
        reports.write_roa(out_dir, result)
        row = {'method': config.method, 'theta': config.theta, 'coverage_pct': result.coverage,
               'mean_cost': None, 'std_cost': None, 'mean_solve_ms': None, 'error': result.design_error or ''}
        reports.write_report(out_dir, [row])
        if options['figures']:
            self._figure(reports.plot_roa, out_dir, {config.method: result}, sys)
        if result.coverage == 0.0:
            raise Infeasible(result.design_error or f"No feasible grid point for {config.method} "
                                                     f"at theta={config.theta}")
        self.stdout.write(f"{config.method}: coverage {result.coverage:.1f}%")
        return {'coverage_pct': result.coverage}

    def run_compare(self, config, out_dir, options):
        comparison = compare_methods(config, workers=options['workers'])
        table = comparison.table
        reports.write_report(out_dir, table, extra={'max_feasible_theta': comparison.max_feasible_theta()})
        reports.write_roa_sweep(out_dir, table)
        for row in table.to_dict(orient='records'):
            if row['error']:
                self.stderr.write(self.style.WARNING(f"{row['method']} at theta={row['theta']}: {row['error']}"))
        if options['figures']:
            self._figure(reports.plot_coverage, out_dir, table)
            at_theta = {method: roa for (method, theta), roa in comparison.roa.items() if theta == config.theta}
            self._figure(reports.plot_roa, out_dir, at_theta, config.build_system())
        self.stdout.write(table[['method', 'theta', 'coverage_pct', 'mean_cost']].to_string(index=False))
        return {'max_feasible_theta': comparison.max_feasible_theta()}

    def run_verify(self, config, out_dir, options):
        settings = config.verify
        if settings.n_steps < 2 * config.N:
            raise ConfigError(f"verify.n_steps must be at least 2N = {2 * config.N}")
        sys = config.build_system()
        design = self._design(config, sys)
        report = verify_containment(design.responses, sys, settings.n_steps, settings.n_samples,
                                    config.simulation.seed, n_walks=settings.n_walks, tubes=design.tubes)
        gap = set_recursion_gap(design.responses, sys, design.tubes)
        reports.write_tubes(out_dir, design.tubes, design.responses,
                            {'theta': config.theta, 'cost_kind': design.kind, 'objective': design.objective})
        reports.write_containment(out_dir, report, {'theta': config.theta, 'set_recursion_gap': gap})
        if not report.passed:
            raise SltmpcError(f"Containment violated by {report.max_violation:.3e}")
        self.stdout.write(f"Containment holds: max violation {report.max_violation:.3e}")
        return report.as_dict()
