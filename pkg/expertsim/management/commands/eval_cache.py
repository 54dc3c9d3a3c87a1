from django.conf import settings

from expertsim.buffer import Policy, buffer_slot_table, policy_sweep
from expertsim.forms import PolicyEvalForm
from expertsim.planner import load_plan
from expertsim.predictor import load_profile
from expertsim.topology import read_trace
from expertsim.utils import dump_json, mb_to_bytes

from ._helpers import ExpertSimCommand, check_form, default_slots, parse_list

POLICY_CHOICES = [p.value for p in Policy] + ['all']


class Command(ExpertSimCommand):
    help = 'Replay a trace through the expert buffer (no preloading) and report hit ratios.'

    def add_arguments(self, parser):
        parser.add_argument('--trace', required=True)
        parser.add_argument('--config', required=True)
        parser.add_argument('--policy', choices=POLICY_CHOICES, default=Policy.EDGEMOE.value)
        parser.add_argument('--slots', help='Buffer size in FP32 experts, or a comma list')
        parser.add_argument('--seed', type=int, default=0, help='Seed of the random policy')
        parser.add_argument('--distance', choices=['printed', 'forward'])
        parser.add_argument('--budgets-mb', help='Also tabulate how many experts fit in these budgets')
        parser.add_argument('--plan', help='Plan used for the budget table')
        parser.add_argument('--predictor', help='Profile whose marginal counts seed the expert frequencies')
        parser.add_argument('--out', required=True)
        self.add_no_timestamp(parser)

    def run(self, **options):
        slot_counts = parse_list(options['slots'], int, 'slots') or [default_slots()]
        distance = options['distance'] or settings.EDGEMOE_EVICTION_DISTANCE
        for slots in slot_counts:
            check_form(PolicyEvalForm, {'slots': slots, 'seed': options['seed'], 'distance': distance})
        cfg = self.load_config(options['config'])
        trace = read_trace(options['trace'], cfg)
        policies = [p for p in Policy] if options['policy'] == 'all' else [Policy(options['policy'])]
        profile = load_profile(options['predictor'], cfg) if options['predictor'] else None

        report = policy_sweep(trace, cfg, policies, slot_counts, seed=options['seed'], distance=distance,
                              profile=profile)
        report.update({'config_digest': cfg.digest(), 'distance': distance, 'steps': list(report['steps']),
                       'seeded_frequencies': profile is not None})
        budgets = parse_list(options['budgets_mb'], float, 'budget')
        if budgets:
            plan = load_plan(options['plan'], cfg) if options['plan'] else None
            report['slot_table'] = buffer_slot_table(cfg, plan, [mb_to_bytes(mb) for mb in budgets])
        dump_json(report, options['out'], timestamp=not options['no_timestamp'])
        for row in report['results']:
            self.stdout.write(f"{row['policy']:>8} slots={row['slots']:<4} hit ratio {row['hit_ratio']:.4f}")
        self.report_written(options['out'])
