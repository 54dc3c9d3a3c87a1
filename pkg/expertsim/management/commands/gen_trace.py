import math

from expertsim.forms import TraceGenForm
from expertsim.topology import TokenTrace, TraceSample, trace_path_for_truth, write_trace
from expertsim.toymodel import build_toy_model, emit_trace
from expertsim.tracegen import (
    DEFAULT_CONCENTRATION,
    DEFAULT_N_PATHS,
    DEFAULT_TOKENS_PER_SAMPLE,
    DEFAULT_ZIPF_S,
    generate_markov_trace,
    generate_powerlaw_trace,
    trace_stats,
)
from expertsim.utils import dump_json

from ._helpers import ExpertSimCommand, check_form


def _truncate(trace: TokenTrace, tokens: int) -> TokenTrace:
    samples, remaining = [], tokens
    for sample in trace.samples:
        if remaining <= 0:
            break
        samples.append(TraceSample(sample.encoder_steps, sample.decode_tokens[:remaining]))
        remaining -= len(samples[-1].decode_tokens)
    return TokenTrace(trace.config_digest, trace.routing_k, trace.encoder_moe_layers,
                      trace.decoder_moe_layers, trace.experts_per_layer, tuple(samples))


class Command(ExpertSimCommand):
    help = 'Generate an activation trace (power-law, Markov or recorded from the toy model).'

    def add_arguments(self, parser):
        parser.add_argument('--config', help='MoE config JSON (default: the built-in toy config)')
        parser.add_argument('--mode', choices=['powerlaw', 'markov', 'toy'], default='powerlaw')
        parser.add_argument('--tokens', type=int, default=100_000)
        parser.add_argument('--tokens-per-sample', type=int, default=DEFAULT_TOKENS_PER_SAMPLE)
        parser.add_argument('--zipf-s', type=float, default=DEFAULT_ZIPF_S)
        parser.add_argument('--n-paths', type=int, default=DEFAULT_N_PATHS)
        parser.add_argument('--concentration', type=float, default=DEFAULT_CONCENTRATION)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True)
        self.add_no_timestamp(parser)

    def run(self, **options):
        cfg = self.load_config(options['config'])
        opts = check_form(TraceGenForm, {
            'tokens': options['tokens'],
            'tokens_per_sample': options['tokens_per_sample'],
            'seed': options['seed'],
            'zipf_s': options['zipf_s'],
            'n_paths': options['n_paths'],
            'concentration': options['concentration'],
        })
        mode = options['mode']
        if mode == 'powerlaw':
            trace = generate_powerlaw_trace(cfg, opts['n_paths'], opts['zipf_s'], opts['tokens'], opts['seed'],
                                            opts['tokens_per_sample'])
        elif mode == 'markov':
            trace, table = generate_markov_trace(cfg, opts['seed'], opts['tokens'], opts['concentration'],
                                                 opts['tokens_per_sample'])
            truth_path = trace_path_for_truth(options['out'])
            dump_json({'config_digest': cfg.digest(), 'seed': opts['seed'], **table.to_dict()}, truth_path,
                      timestamp=not options['no_timestamp'])
            self.report_written(truth_path, 'ground-truth table')
        else:
            model = build_toy_model(cfg)
            n_samples = math.ceil(opts['tokens'] / opts['tokens_per_sample'])
            trace = _truncate(emit_trace(model, n_samples, opts['tokens_per_sample'], seed=opts['seed']),
                              opts['tokens'])
        write_trace(trace, options['out'])
        stats = trace_stats(trace)
        self.stdout.write(
            f'{mode} trace: {stats.tokens} tokens, {stats.distinct_paths} distinct paths, '
            f'top-20% share {stats.top_share(0.2):.4f}')
        self.report_written(options['out'], 'trace')
