from expertsim.pipeline import check_event_log, simulate, write_event_log
from expertsim.utils import dump_json

from ._helpers import ExpertSimCommand
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
    help = 'Simulate decoding a trace with one engine and report TPOT, hit ratio and memory.'

    def add_arguments(self, parser):
        add_simulation_arguments(parser)
        parser.add_argument('--engine', choices=ENGINE_CHOICES, default='edgemoe')
        parser.add_argument('--budget-mb', type=float)
        parser.add_argument('--slots', type=int, help='Budget as room for N FP32 experts')
        parser.add_argument('--out', required=True)
        parser.add_argument('--event-log', help='Write every compute/I/O interval to this CSV file')
        self.add_no_timestamp(parser)

    def run(self, **options):
        preload_m = validate_options(options, options['budget_mb'], options['slots'])
        cfg, trace, plan, profile = load_inputs(options)
        cost = build_cost(options, cfg, plan)
        engine = build_engine(options['engine'], options, plan, profile, preload_m)
        budget = budget_bytes(cfg, cost, options['budget_mb'], options['slots'])

        report = simulate(trace, cfg, engine, cost, budget, record_events=bool(options['event_log']))
        payload = report.to_dict()
        payload.update({'config_digest': cfg.digest(), 'cost': cost.name})
        if options['event_log']:
            write_event_log(report.events, options['event_log'])
            violations = check_event_log(report.events)
            payload['event_log_violations'] = violations
            self.report_written(options['event_log'], 'event log')
        dump_json(payload, options['out'], timestamp=not options['no_timestamp'])
        self.stdout.write(f'{report.engine}: TPOT {report.tpot_seconds:.6e}s over {report.tokens} tokens, '
                          f'hit ratio {report.hit_ratio:.4f}, peak {report.peak_resident_bytes} bytes')
        self.report_written(options['out'])
