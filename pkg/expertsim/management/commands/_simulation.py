# Options and input assembly shared by the simulate and compare commands.

from dataclasses import replace

from django.conf import settings
from django.core.management.base import CommandError

from expertsim.forms import SimulationOptionsForm
from expertsim.pipeline import CostModel, EngineKind, EngineSpec
from expertsim.planner import load_plan
from expertsim.predictor import load_profile
from expertsim.topology import Bitwidth, expert_size_bytes, load_config, non_expert_param_bytes, read_trace
from expertsim.utils import mb_to_bytes

from ._helpers import USAGE_ERROR, check_form, parse_bitwidth

ENGINE_CHOICES = [kind.value for kind in EngineKind]


def add_simulation_arguments(parser):
    parser.add_argument('--trace', required=True)
    parser.add_argument('--config', required=True)
    parser.add_argument('--plan', help='Quantization plan (required for edgemoe)')
    parser.add_argument('--predictor', help='Activation profile (required for edgemoe)')
    parser.add_argument('--cost', help='Cost preset name')
    parser.add_argument('--load-compute-ratio', type=float,
                        help='Rescale compute so on-demand FP32 decoding is this many times the IO-free time')
    parser.add_argument('--preload-m', type=int)
    parser.add_argument('--policy', choices=['edgemoe', 'lru', 'lfu', 'fifo', 'random'], default='edgemoe')
    parser.add_argument('--distance', choices=['printed', 'forward'])
    parser.add_argument('--io-exp-bitwidth', default='FP32', help='INT2..FP32, or "plan" for the plan bitwidths')
    parser.add_argument('--io-qexp-bitwidth', default='INT4')
    parser.add_argument('--seed', type=int, default=0)


def load_inputs(options):
    """Config, trace, plan and profile named by the options; digests are checked against the config."""
    cfg = load_config(options['config'])
    trace = read_trace(options['trace'], cfg)
    plan = load_plan(options['plan'], cfg) if options['plan'] else None
    profile = load_profile(options['predictor'], cfg) if options['predictor'] else None
    return cfg, trace, plan, profile


def build_cost(options, cfg, plan):
    cost = CostModel.preset(options['cost'])
    if options['load_compute_ratio'] is not None:
        cost = cost.calibrated(cfg, options['load_compute_ratio'])
    # every engine in one run shares the same resident non-expert weights
    non_expert = plan.non_expert_bitwidth if plan is not None else Bitwidth.FP32
    return replace(cost, non_expert_resident_bytes=non_expert_param_bytes(cfg, non_expert))


def budget_bytes(cfg, cost, budget_mb=None, slots=None):
    """--budget-mb wins; --slots N means room for N FP32 experts next to the non-expert weights."""
    if budget_mb is not None:
        return mb_to_bytes(budget_mb)
    if slots is None:
        slots = settings.EDGEMOE_BUFFER_SLOTS
    return cost.non_expert_resident_bytes + slots * expert_size_bytes(cfg, Bitwidth.FP32)


def validate_options(options, budget_mb=None, slots=None):
    preload_m = options['preload_m'] if options['preload_m'] is not None else settings.EDGEMOE_PRELOAD_M
    check_form(SimulationOptionsForm, {
        'preload_m': preload_m,
        'budget_mb': budget_mb,
        'slots': slots,
        'load_compute_ratio': options['load_compute_ratio'],
    })
    return preload_m


def build_engine(kind, options, plan, profile, preload_m):
    kind = EngineKind(kind)
    if kind == EngineKind.IO_FREE:
        return EngineSpec.io_free()
    if kind == EngineKind.IO_QEXP:
        return EngineSpec.io_qexp(parse_bitwidth(options['io_qexp_bitwidth']))
    if kind == EngineKind.IO_EXP:
        bitwidth = parse_bitwidth(options['io_exp_bitwidth'], allow_plan=True)
        if bitwidth == 'plan':
            if plan is None:
                raise CommandError('--io-exp-bitwidth plan needs --plan', returncode=USAGE_ERROR)
            return EngineSpec.io_exp(plan=plan)
        return EngineSpec.io_exp(bitwidth)
    if plan is None or profile is None:
        raise CommandError('the edgemoe engine needs --plan and --predictor', returncode=USAGE_ERROR)
    return EngineSpec.edgemoe(plan, profile, preload_m, policy=options['policy'],
                              distance=options['distance'], seed=options['seed'])
