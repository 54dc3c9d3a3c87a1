from pathlib import Path

from django.conf import settings

from expertsim.forms import PlanOptionsForm
from expertsim.planner import plan_report, profile_importance, save_heatmap, select_bitwidths, uniform_sweep
from expertsim.toymodel import build_probes, build_toy_model
from expertsim.utils import StepLog, dump_json

from ._helpers import ExpertSimCommand, check_form, parse_list


def _plan_path(out, loss, many):
    if not many:
        return out
    p = Path(out)
    return p.with_name(f'{p.stem}-loss{loss:g}{p.suffix or ".json"}')


class Command(ExpertSimCommand):
    help = 'Choose per-expert bitwidths for the toy model under a tolerable accuracy loss.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True)
        parser.add_argument('--loss', help='Tolerable accuracy loss P, or a comma list for a sweep')
        parser.add_argument('--out', required=True, help='Plan JSON (one file per P when sweeping)')
        parser.add_argument('--heatmap-out')
        parser.add_argument('--probes', type=int)
        parser.add_argument('--probe-seed', type=int)
        self.add_no_timestamp(parser)

    def run(self, **options):
        losses = parse_list(options['loss'], float, 'loss') or [settings.EDGEMOE_TOLERABLE_LOSS]
        n_probes = options['probes'] if options['probes'] is not None else settings.EDGEMOE_PROBES
        probe_seed = options['probe_seed'] if options['probe_seed'] is not None else settings.EDGEMOE_PROBE_SEED
        for loss in losses:
            check_form(PlanOptionsForm, {'loss': loss, 'probes': n_probes, 'probe_seed': probe_seed})
        cfg = self.load_config(options['config'])
        timestamp = not options['no_timestamp']

        steps = StepLog()
        model = build_toy_model(cfg)
        probes = build_probes(model, n_probes, probe_seed)
        steps.info('toy model %s with %d experts, %d probes', cfg.digest(), cfg.total_experts, n_probes)
        heatmap = profile_importance(model, probes)
        sweep = uniform_sweep(model, probes)
        steps.info('uniform sweep: %s', ', '.join(f'{b}={v:.4f}' for b, v in sweep.to_dict().items()))
        if options['heatmap_out']:
            save_heatmap(heatmap, options['heatmap_out'], timestamp=timestamp)
            self.report_written(options['heatmap_out'], 'heatmap')

        summary = []
        for loss in losses:
            plan_steps = StepLog(steps)
            plan = select_bitwidths(model, probes, heatmap, sweep, loss, plan_steps)
            path = _plan_path(options['out'], loss, len(losses) > 1)
            dump_json(plan_report(plan, cfg, sweep=sweep, steps=plan_steps), path, timestamp=timestamp)
            summary.append((loss, plan))
            self.report_written(path, f'plan for P={loss:g}')
        for loss, plan in summary:
            self.stdout.write(f'P={loss:g}: K={plan.low_bit_count} at {plan.bounds[0].name}/{plan.bounds[1].name}, '
                              f'non-expert {plan.non_expert_bitwidth.name}, measured loss {plan.measured_loss:.4f}')
