from expertsim.pipeline import compare_engines
from expertsim.utils import dump_json

from ._helpers import ExpertSimCommand, parse_list
from ._simulation import (
    ENGINE_CHOICES,
    add_simulation_arguments,
    budget_bytes,
    build_cost,
    build_engine,
    load_inputs,
    validate_options,
)


class Command(ExpertSimCommand):
    help = 'Simulate several engines on the same trace and report TPOT speedups.'

    def add_arguments(self, parser):
        add_simulation_arguments(parser)
        parser.add_argument('--engines', default='all', help=f'"all" or a comma list of {", ".join(ENGINE_CHOICES)}')
        parser.add_argument('--budgets-mb', help='Memory budget in MB, or a comma list for a budget sweep')
        parser.add_argument('--slots', type=int, help='Budget as room for N FP32 experts')
        parser.add_argument('--out', required=True)
        self.add_no_timestamp(parser)

    def run(self, **options):
        kinds = ENGINE_CHOICES if options['engines'] == 'all' else parse_list(options['engines'], str, 'engine')
        unknown = sorted(set(kinds) - set(ENGINE_CHOICES))
        if unknown:
            self.usage_error(f'unknown engine(s): {", ".join(unknown)}')
        budgets_mb = parse_list(options['budgets_mb'], float, 'budget') or [None]
        preload_m = 1
        for mb in budgets_mb:
            preload_m = validate_options(options, mb, options['slots'])
        cfg, trace, plan, profile = load_inputs(options)
        cost = build_cost(options, cfg, plan)
        engines = [build_engine(kind, options, plan, profile, preload_m) for kind in kinds]

        comparisons = []
        for mb in budgets_mb:
            budget = budget_bytes(cfg, cost, mb, options['slots'])
            result = compare_engines(trace, cfg, engines, cost, budget)
            comparisons.append(result)
            self.stdout.write(f'budget {budget} bytes')
            for row in result['engines']:
                speedup = row['speedup_vs_io_exp']
                self.stdout.write(f"  {row['engine']:>14} TPOT {row['tpot_seconds']:.6e}s"
                                  + (f'  x{speedup:.2f} vs io-exp' if speedup else ''))
        payload = {'config_digest': cfg.digest(), 'cost': cost.name, 'comparisons': comparisons}
        dump_json(payload, options['out'], timestamp=not options['no_timestamp'])
        self.report_written(options['out'])
