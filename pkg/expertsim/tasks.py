import functools
import json

from celery import shared_task

from .toymodel import QuantPlan, build_probes, build_toy_model, evaluate_agreement
from .topology import MoEConfig
from .utils import cache_set


@functools.lru_cache(maxsize=8)
def _model_and_probes(cfg_json, n_probes, probe_seed):
    model = build_toy_model(MoEConfig.from_dict(json.loads(cfg_json)))
    return model, build_probes(model, n_probes, probe_seed)


def accuracy_cache_key(model_digest, probes_digest, plan_digest):
    return f'plan-accuracy:{model_digest}:{probes_digest}:{plan_digest}'


@shared_task(bind=True)
def measure_plan_task(self, cfg_dict, plan_dict, n_probes, probe_seed):
    """Measure one plan's probe agreement and cache it under the plan-accuracy key.

    The toy model and probes are rebuilt from the config, so every argument is JSON.
    """
    model, probes = _model_and_probes(json.dumps(cfg_dict, sort_keys=True), n_probes, probe_seed)
    plan = QuantPlan.from_dict(plan_dict)
    accuracy = evaluate_agreement(model, plan, probes)
    cache_set(accuracy_cache_key(model.digest, probes.digest, plan.digest()), accuracy)
    return accuracy
