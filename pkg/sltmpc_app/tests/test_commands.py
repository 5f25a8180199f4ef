import json
import tempfile
from dataclasses import replace
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import DatabaseError
from django.test import TestCase

from sltmpc_app.config import RoaSettings, SimulationSettings, VerifySettings, load_config, serialize
from sltmpc_app.models import ExperimentRun


class SltmpcCommandTests(TestCase):
    """Runs the command end to end on a reduced experiment"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        config = replace(load_config(), methods=('ct-mpc',),
                         simulation=SimulationSettings(T=3, n_runs=2, seed=0),
                         roa=RoaSettings(10, (0.04,)),
                         verify=VerifySettings(n_steps=20, n_samples=20, n_walks=20))
        self.config_path = self.root / 'experiment.json'
        self.config_path.write_text(serialize(config))

    def run_command(self, name, out='out', **options):
        stdout, stderr = StringIO(), StringIO()
        call_command('sltmpc', name, config=str(self.config_path), out=str(self.root / out),
                     stdout=stdout, stderr=stderr, **options)
        return stdout.getvalue()

    def read_json(self, out, name):
        return json.loads((self.root / out / name).read_text())

    def test_verify_writes_containment(self):
        output = self.run_command('verify')
        self.assertIn('Containment holds', output)
        containment = self.read_json('out', 'containment.json')
        self.assertEqual(containment['schema_version'], 1)
        self.assertTrue(containment['passed'])
        self.assertLessEqual(containment['set_recursion_gap'], 1e-9)
        self.assertTrue((self.root / 'out' / 'tubes.json').exists())
        run = ExperimentRun.objects.get()
        self.assertEqual(run.command, 'verify')
        self.assertTrue(run.succeeded)
        self.assertEqual(run.theta, 0.04)

    def test_synth_tubes_with_figures(self):
        self.run_command('synth-tubes', figures=True, all_costs=True)
        tubes = self.read_json('out', 'tubes.json')
        self.assertEqual(tubes['cost_kind'], 'min-tightening')
        self.assertEqual(len(tubes['state_offsets']), 11)
        self.assertTrue(tubes['responses']['fir'])
        header = (self.root / 'out' / 'tube_costs.csv').read_text().splitlines()[0]
        self.assertTrue(header.startswith('schema_version,kind'))
        self.assertTrue((self.root / 'out' / 'tubes.png').exists())

    def test_solve_writes_solution(self):
        self.run_command('solve')
        solution = self.read_json('out', 'solution.json')
        self.assertEqual(solution['schema_version'], 1)
        self.assertEqual(solution['method'], 'fir-sltmpc')
        self.assertEqual(len(solution['u0']), 1)

    def test_simulate_writes_trajectories(self):
        self.run_command('simulate', seed=4)
        lines = (self.root / 'out' / 'trajectories.csv').read_text().splitlines()
        self.assertEqual(lines[0], 'schema_version,run,t,x1,x2,u1,w1,w2,stage_cost')
        self.assertEqual(len(lines), 1 + 2 * 4)
        report = self.read_json('out', 'report.json')
        self.assertEqual(report['rows'][0]['method'], 'fir-sltmpc')
        self.assertIsNone(report['rows'][0]['coverage_pct'])
        self.assertEqual(report['simulation']['seed'], 4)
        self.assertEqual(report['simulation']['n_aborted'], 0)

    def test_trajectories_reproducible(self):
        self.run_command('simulate', out='first')
        self.run_command('simulate', out='second')
        first = (self.root / 'first' / 'trajectories.csv').read_bytes()
        second = (self.root / 'second' / 'trajectories.csv').read_bytes()
        self.assertEqual(first, second)

    def test_compare_one_method(self):
        self.run_command('compare')
        report = self.read_json('out', 'report.json')
        self.assertEqual([row['method'] for row in report['rows']], ['ct-mpc'])
        self.assertGreater(report['rows'][0]['coverage_pct'], 0.0)
        self.assertEqual(report['max_feasible_theta'], {'ct-mpc': 0.04})
        header = (self.root / 'out' / 'roa_sweep.csv').read_text().splitlines()[0]
        self.assertEqual(header, 'schema_version,method,theta,coverage_pct,error')

    def test_roa_without_design_exits_infeasible(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command('roa', theta=0.5, method='fir-sltmpc-offline', resolution=10)
        self.assertEqual(ctx.exception.returncode, 1)
        report = self.read_json('out', 'report.json')
        self.assertEqual(report['rows'][0]['coverage_pct'], 0.0)
        self.assertIn('error', report['rows'][0])
        header = (self.root / 'out' / 'roa.csv').read_text().splitlines()[0]
        self.assertEqual(header, 'schema_version,x1,x2,feasible')
        self.assertEqual(ExperimentRun.objects.get().exit_status, 1)

    def test_bad_config_exits_with_config_status(self):
        data = json.loads(self.config_path.read_text())
        data['horizon'] = 3
        self.config_path.write_text(json.dumps(data))
        with self.assertRaises(CommandError) as ctx:
            self.run_command('solve')
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('horizon', str(ctx.exception))

    def test_indefinite_weight_exits_with_config_status(self):
        data = json.loads(self.config_path.read_text())
        data['R'] = [[-10.0]]
        self.config_path.write_text(json.dumps(data))
        with self.assertRaises(CommandError) as ctx:
            self.run_command('solve')
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('R', str(ctx.exception))

    def test_missing_config_exits_with_config_status(self):
        self.config_path.unlink()
        with self.assertRaises(CommandError) as ctx:
            self.run_command('solve')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_short_verify_window_rejected(self):
        data = json.loads(self.config_path.read_text())
        data['verify']['n_steps'] = 5
        self.config_path.write_text(json.dumps(data))
        with self.assertRaises(CommandError) as ctx:
            self.run_command('verify')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_ledger_failure_does_not_fail_the_command(self):
        with mock.patch.object(ExperimentRun.objects, 'create', side_effect=DatabaseError('database is locked')):
            with self.assertLogs('sltmpc_app.management.commands.sltmpc', 'WARNING') as logs:
                self.run_command('solve')
        self.assertIn('database is locked', logs.output[0])
        self.assertTrue((self.root / 'out' / 'solution.json').exists())
        self.assertFalse(ExperimentRun.objects.exists())

    @mock.patch.dict('django.conf.settings.SLTMPC', {'RECORD_RUNS': False})
    def test_ledger_can_be_disabled(self):
        self.run_command('solve')
        self.assertFalse(ExperimentRun.objects.exists())
