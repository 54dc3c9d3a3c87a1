from django.conf import settings

from expertsim.forms import PredictorOptionsForm
from expertsim.predictor import build_profile, load_profile, merge_profiles, save_profile
from expertsim.topology import read_trace

from ._helpers import ExpertSimCommand, check_form


class Command(ExpertSimCommand):
    help = 'Build the activation profile used for expert preloading from one or more traces.'

    def add_arguments(self, parser):
        parser.add_argument('--trace', nargs='+', required=True)
        parser.add_argument('--config', help='Reject traces that were not recorded for this config')
        parser.add_argument('--history', type=int)
        parser.add_argument('--alpha', type=float)
        parser.add_argument('--min-count', type=int)
        parser.add_argument('--merge', help='Existing profile whose counts are added to the new one')
        parser.add_argument('--out', required=True)
        self.add_no_timestamp(parser)

    def run(self, **options):
        opts = check_form(PredictorOptionsForm, {
            'history': options['history'] if options['history'] is not None else settings.EDGEMOE_PREDICTOR_HISTORY,
            'alpha': options['alpha'] if options['alpha'] is not None else settings.EDGEMOE_PREDICTOR_ALPHA,
            'min_count': (options['min_count'] if options['min_count'] is not None
                          else settings.EDGEMOE_PREDICTOR_MIN_COUNT),
        })
        cfg = self.load_config(options['config']) if options['config'] else None
        traces = [read_trace(path, cfg) for path in options['trace']]
        profile = build_profile(traces, opts['history'], opts['alpha'], opts['min_count'])
        if options['merge']:
            profile = merge_profiles(load_profile(options['merge'], cfg), profile)
        save_profile(profile, options['out'], timestamp=not options['no_timestamp'])
        self.stdout.write(f'{profile.n_tokens} tokens, {len(profile.counts)} history keys (h={profile.history})')
        self.report_written(options['out'], 'profile')
