from django import forms

MAX_SEED = 2 ** 64 - 1
MAX_HISTORY = 3


def _at_least(name, bound):
    return {'min_value': f'{name} ≥ {bound}', 'required': f'{name} is required', 'invalid': f'{name} must be an integer'}


def form_errors(form) -> list:
    """Flatten a bound form's errors into human-readable messages."""
    return [msg for errors in form.errors.values() for msg in errors]


class MoEConfigForm(forms.Form):
    """Validates a MoE topology; messages name the violated invariant."""

    encoder_layers = forms.IntegerField(min_value=0, error_messages=_at_least('encoder_layers', 0))
    encoder_moe_layers = forms.IntegerField(min_value=0, error_messages=_at_least('encoder_moe_layers', 0))
    decoder_layers = forms.IntegerField(min_value=1, error_messages=_at_least('decoder_layers', 1))
    decoder_moe_layers = forms.IntegerField(min_value=1, error_messages=_at_least('decoder_moe_layers', 1))
    experts_per_layer = forms.IntegerField(min_value=2, error_messages=_at_least('experts_per_layer', 2))
    routing_k = forms.IntegerField(min_value=1, error_messages=_at_least('routing_k', 1))
    model_dim = forms.IntegerField(min_value=1, error_messages=_at_least('model_dim', 1))
    ffn_hidden_dim = forms.IntegerField(min_value=1, error_messages=_at_least('ffn_hidden_dim', 1))
    seed = forms.IntegerField(
        min_value=0, max_value=MAX_SEED,
        error_messages={**_at_least('seed', 0), 'max_value': 'seed must fit in 64 bits'},
    )
    head_classes = forms.IntegerField(min_value=2, error_messages=_at_least('head_classes', 2))

    def clean(self):
        cleaned = super().clean()
        pairs = [
            ('encoder_moe_layers', 'encoder_layers'),
            ('decoder_moe_layers', 'decoder_layers'),
            ('routing_k', 'experts_per_layer'),
        ]
        for small, large in pairs:
            if small in cleaned and large in cleaned and cleaned[small] > cleaned[large]:
                self.add_error(None, f'{small} ≤ {large}')
        return cleaned


class PlanOptionsForm(forms.Form):
    loss = forms.FloatField(min_value=0.0, error_messages={'min_value': 'tolerable loss must lie in [0, 1)'})
    probes = forms.IntegerField(min_value=1, error_messages=_at_least('probes', 1))
    probe_seed = forms.IntegerField(min_value=0, max_value=MAX_SEED)

    def clean_loss(self):
        loss = self.cleaned_data['loss']
        if loss >= 1.0:
            raise forms.ValidationError('tolerable loss must lie in [0, 1)')
        return loss


class PredictorOptionsForm(forms.Form):
    history = forms.IntegerField(
        min_value=1, max_value=MAX_HISTORY,
        error_messages={'min_value': 'history must be 1-3', 'max_value': 'history must be 1-3'},
    )
    alpha = forms.FloatField(min_value=0.0, error_messages={'min_value': 'alpha ≥ 0'})
    min_count = forms.IntegerField(min_value=1, error_messages=_at_least('min_count', 1))


class PolicyEvalForm(forms.Form):
    slots = forms.IntegerField(min_value=0, error_messages=_at_least('slots', 0))
    seed = forms.IntegerField(min_value=0, max_value=MAX_SEED)
    distance = forms.ChoiceField(choices=[('printed', 'printed'), ('forward', 'forward')])


class SimulationOptionsForm(forms.Form):
    preload_m = forms.IntegerField(min_value=1, error_messages=_at_least('preload_m', 1))
    budget_mb = forms.FloatField(required=False, min_value=0.0, error_messages={'min_value': 'budget must be ≥ 0 MB'})
    slots = forms.IntegerField(required=False, min_value=0, error_messages=_at_least('slots', 0))
    load_compute_ratio = forms.FloatField(
        required=False, min_value=1.0, error_messages={'min_value': 'load/compute ratio must be ≥ 1'},
    )

    def clean(self):
        cleaned = super().clean()
        if cleaned.get('budget_mb') is not None and cleaned.get('slots') is not None:
            self.add_error(None, 'give either --budget-mb or --slots, not both')
        return cleaned


class TraceGenForm(forms.Form):
    tokens = forms.IntegerField(min_value=1, error_messages=_at_least('tokens', 1))
    tokens_per_sample = forms.IntegerField(min_value=1, error_messages=_at_least('tokens_per_sample', 1))
    seed = forms.IntegerField(min_value=0, max_value=MAX_SEED)
    zipf_s = forms.FloatField(min_value=0.0, error_messages={'min_value': 'zipf_s ≥ 0'})
    n_paths = forms.IntegerField(min_value=1, error_messages=_at_least('n_paths', 1))
    concentration = forms.FloatField(error_messages={'required': 'concentration is required'})

    def clean_concentration(self):
        value = self.cleaned_data['concentration']
        if value <= 0:
            raise forms.ValidationError('concentration must be > 0')
        return value
