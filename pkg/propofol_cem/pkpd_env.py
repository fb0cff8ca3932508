"""Virtual patient: propofol kinetics, effect site, Hill response, sensor.

The state is the drug amount (mg) in the central, slow peripheral and
rapid peripheral compartments, stepped every ``delta_t`` seconds.  The
effect site follows the central compartment through a first-order link
and the level of unconsciousness (LoU) is a Hill function of the effect
site level.
"""

import logging
import math

from dataclasses import dataclass, field

import numpy as np

from scipy.linalg import expm

from .exceptions import ParameterError

logger = logging.getLogger(__name__)

__all__ = [
    'DEFAULT_RANGES', 'DiscretePatientModel', 'EnvironmentSettings',
    'MeasurementModel', 'ParameterRange', 'PatientDemographics',
    'PatientParams', 'PatientRanges', 'PatientState', 'RateConstants',
    'SCHNIDER', 'build_discrete_model', 'continuous_rate_matrix',
    'hill_response', 'measure', 'sample_patient', 'schnider_rates',
    'step_patient']

MALE = 'male'
FEMALE = 'female'
SEXES = (MALE, FEMALE)

LINK_BETA_MODES = ('steady_state', 'paper_literal')
LINK_INPUTS = ('amount', 'concentration')
DISCRETIZATIONS = ('expm', 'euler')

#: Schnider propofol covariate model.  Volumes in L, clearances in L/min,
#: covariates centered on the reference adult of the original study.
SCHNIDER = dict(
    version='schnider-1998/1',
    v1=4.27, v2=18.9, v2_age=-0.391, v3=238.0,
    cl1=1.89, cl1_weight=0.0456, cl1_lbm=-0.0681, cl1_height=0.0264,
    cl2=1.29, cl2_age=-0.024, cl3=0.836,
    age_ref=53.0, weight_ref=77.0, lbm_ref=59.0, height_ref=177.0)

# Demographics outside these bounds are rejected before the covariate
# formulas turn volumes or clearances negative.
PHYSICAL_LIMITS = dict(age=(1.0, 100.0), height=(100.0, 250.0),
                       weight=(20.0, 250.0))


@dataclass(frozen=True)
class PatientDemographics(object):
    age: float
    height: float
    weight: float
    sex: str = MALE

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ParameterError('unknown sex %r' % (self.sex,))
        for name in ('age', 'height', 'weight'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(
                    '%s must be a positive number, got %r' % (name, value))

    def lean_body_mass(self):
        """Lean body mass in kg (James formula)."""
        ratio = (self.weight / self.height) ** 2
        if self.sex == MALE:
            return 1.1 * self.weight - 128.0 * ratio
        return 1.07 * self.weight - 148.0 * ratio

    def check_physical(self):
        for name, (lo, hi) in PHYSICAL_LIMITS.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ParameterError(
                    '%s=%r is outside the physical range [%r, %r]'
                    % (name, value, lo, hi))


@dataclass(frozen=True)
class PatientParams(object):
    """One virtual patient: demographics, link rate and Hill parameters."""

    demographics: PatientDemographics
    ke0: float
    gamma: float
    c50: float

    def __post_init__(self):
        for name in ('ke0', 'gamma', 'c50'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(
                    '%s must be a positive number, got %r' % (name, value))

    @property
    def age(self):
        return self.demographics.age

    @property
    def height(self):
        return self.demographics.height

    @property
    def weight(self):
        return self.demographics.weight

    @property
    def sex(self):
        return self.demographics.sex

    def as_dict(self):
        return dict(
            age=self.age, height=self.height, weight=self.weight,
            sex=self.sex, ke0=self.ke0, gamma=self.gamma, c50=self.c50)


@dataclass(frozen=True)
class ParameterRange(object):
    generic: float
    min: float
    max: float

    def __post_init__(self):
        if not self.min <= self.max:
            raise ParameterError(
                'range minimum %r exceeds maximum %r' % (self.min, self.max))

    def contains(self, value):
        return self.min <= value <= self.max


PARAMETER_NAMES = ('height', 'weight', 'age', 'ke0', 'gamma', 'c50')


@dataclass(frozen=True)
class PatientRanges(object):
    """Generic values and sampling ranges for the virtual patients."""

    height: ParameterRange = ParameterRange(170.0, 160.0, 190.0)
    weight: ParameterRange = ParameterRange(70.0, 50.0, 100.0)
    age: ParameterRange = ParameterRange(30.0, 18.0, 90.0)
    ke0: ParameterRange = ParameterRange(0.17, 0.128, 0.213)
    gamma: ParameterRange = ParameterRange(5.0, 5.0, 9.0)
    c50: ParameterRange = ParameterRange(2.5, 2.0, 6.0)
    sex: str = MALE
    randomize_sex: bool = True

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ParameterError('unknown sex %r' % (self.sex,))

    @classmethod
    def fixed(cls, patient):
        """Degenerate ranges that only ever produce ``patient``."""
        values = patient.as_dict()
        ranges = {name: ParameterRange(values[name], values[name],
                                       values[name])
                  for name in PARAMETER_NAMES}
        return cls(sex=patient.sex, randomize_sex=False, **ranges)

    def generic_patient(self):
        return PatientParams(
            PatientDemographics(
                age=self.age.generic, height=self.height.generic,
                weight=self.weight.generic, sex=self.sex),
            ke0=self.ke0.generic, gamma=self.gamma.generic,
            c50=self.c50.generic)

    def contains(self, patient):
        values = patient.as_dict()
        return all(getattr(self, name).contains(values[name])
                   for name in PARAMETER_NAMES)


DEFAULT_RANGES = PatientRanges()


@dataclass(frozen=True)
class RateConstants(object):
    """First-order transfer rates in 1/min; ``v1`` in L."""

    k10: float
    k12: float
    k13: float
    k21: float
    k31: float
    v1: float = SCHNIDER['v1']

    def __post_init__(self):
        for name in ('k10', 'k12', 'k13', 'k21', 'k31'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ParameterError(
                    'rate %s must be nonnegative, got %r' % (name, value))


def schnider_rates(demographics):
    """Derive compartment transfer rates from the Schnider covariates.

    Compartment 2 of the state is the slow peripheral one (Schnider V3,
    Cl3) and compartment 3 the rapid peripheral one (Schnider V2, Cl2).
    """
    demographics.check_physical()
    s = SCHNIDER
    lbm = demographics.lean_body_mass()
    v1 = s['v1']
    v_rapid = s['v2'] + s['v2_age'] * (demographics.age - s['age_ref'])
    v_slow = s['v3']
    cl1 = (s['cl1']
           + s['cl1_weight'] * (demographics.weight - s['weight_ref'])
           + s['cl1_lbm'] * (lbm - s['lbm_ref'])
           + s['cl1_height'] * (demographics.height - s['height_ref']))
    cl_rapid = s['cl2'] + s['cl2_age'] * (demographics.age - s['age_ref'])
    cl_slow = s['cl3']
    for name, value in (('lean body mass', lbm), ('V2', v_rapid),
                        ('Cl1', cl1), ('Cl2', cl_rapid)):
        if value <= 0:
            raise ParameterError(
                '%s is not positive (%r) for %r' % (name, value, demographics))
    return RateConstants(
        k10=cl1 / v1, k12=cl_slow / v1, k13=cl_rapid / v1,
        k21=cl_slow / v_slow, k31=cl_rapid / v_rapid, v1=v1)


def continuous_rate_matrix(rates):
    """Rate matrix of dx/dt = A_c x in 1/s acting on compartment amounts."""
    r = rates
    per_minute = np.array([
        [-(r.k10 + r.k12 + r.k13), r.k21, r.k31],
        [r.k12, -r.k21, 0.0],
        [r.k13, 0.0, -r.k31]])
    return per_minute / 60.0


@dataclass(frozen=True, eq=False)
class DiscretePatientModel(object):
    """Per-step PK transfer, effect-site link and Hill parameters."""

    a_matrix: np.ndarray
    b_vector: np.ndarray
    alpha: float
    beta: float
    gamma: float
    c50: float
    delta_t: float = 5.0
    rates: RateConstants = field(default=None, compare=False)

    @property
    def dose(self):
        """Drug mass in mg delivered by one full-rate step."""
        return float(self.b_vector[0])


@dataclass(frozen=True, eq=False)
class PatientState(object):
    x: np.ndarray
    x_e: float = 0.0
    k: int = 0

    @classmethod
    def initial(cls):
        return cls(np.zeros(3), 0.0, 0)


@dataclass(frozen=True)
class MeasurementModel(object):
    noise_variance: float = 0.0003

    def __post_init__(self):
        if not (math.isfinite(self.noise_variance)
                and self.noise_variance >= 0):
            raise ParameterError(
                'noise variance must be nonnegative, got %r'
                % (self.noise_variance,))

    def sample_noise(self, rng, size):
        return rng.normal(0.0, math.sqrt(self.noise_variance), size)


@dataclass(frozen=True)
class EnvironmentSettings(object):
    """Simulation constants shared by environment and agent."""

    delta_t: float = 5.0
    infusion_rate: float = 1.67
    noise_variance: float = 0.0003
    link_beta: str = 'steady_state'
    link_input: str = 'amount'
    discretization: str = 'expm'
    euler_substep: float = 1.0

    def __post_init__(self):
        if not self.delta_t > 0:
            raise ParameterError('delta_t must be positive')
        if not self.infusion_rate > 0:
            raise ParameterError('infusion_rate must be positive')
        for name, choices in (('link_beta', LINK_BETA_MODES),
                              ('link_input', LINK_INPUTS),
                              ('discretization', DISCRETIZATIONS)):
            if getattr(self, name) not in choices:
                raise ParameterError('%s must be one of %s, got %r' % (
                    name, ', '.join(choices), getattr(self, name)))
        MeasurementModel(self.noise_variance)

    @property
    def measurement(self):
        return MeasurementModel(self.noise_variance)

    def build(self, params, rates=None):
        return build_discrete_model(
            params, self.delta_t, infusion_rate=self.infusion_rate,
            link_beta=self.link_beta, link_input=self.link_input,
            discretization=self.discretization,
            euler_substep=self.euler_substep, rates=rates)


def _euler_propagator(rate_matrix, delta_t, substep):
    n_sub = int(round(delta_t / substep))
    if n_sub < 1 or not math.isclose(n_sub * substep, delta_t):
        raise ParameterError(
            'euler_substep %r does not divide delta_t %r'
            % (substep, delta_t))
    one_step = np.eye(3) + rate_matrix * substep
    if np.any(np.diag(one_step) < 0):
        raise ParameterError(
            'euler_substep %r is too coarse for these rates' % (substep,))
    return np.linalg.matrix_power(one_step, n_sub)


def build_discrete_model(
        params, delta_t=5.0, infusion_rate=1.67,
        link_beta='steady_state', link_input='amount',
        discretization='expm', euler_substep=1.0, rates=None):
    """Discretize the patient's PK/PD model at ``delta_t`` seconds.

    ``rates`` overrides the Schnider rate constants, for diagnostics with
    disabled transfers.  ``link_beta`` selects the effect-site input gain:
    ``steady_state`` uses ``1 - alpha`` so the effect site settles on the
    central level, ``paper_literal`` uses ``ke0/60 * alpha``.
    """
    if not delta_t > 0:
        raise ParameterError('delta_t must be positive, got %r' % (delta_t,))
    if rates is None:
        rates = schnider_rates(params.demographics)
    rate_matrix = continuous_rate_matrix(rates)
    if discretization == 'expm':
        a_matrix = expm(rate_matrix * delta_t)
    elif discretization == 'euler':
        a_matrix = _euler_propagator(rate_matrix, delta_t, euler_substep)
    else:
        raise ParameterError('unknown discretization %r' % (discretization,))
    # expm rounding can leave tiny negative entries on zero paths
    a_matrix = np.maximum(a_matrix, 0.0)
    a_matrix.setflags(write=False)

    # pump volumes are quoted to 0.1 ng, keep 8.35 mg exact
    dose = round(infusion_rate * delta_t, 10)
    b_vector = np.array([dose, 0.0, 0.0])
    b_vector.setflags(write=False)

    alpha = math.exp(-params.ke0 * delta_t / 60.0)
    if link_beta == 'steady_state':
        beta = 1.0 - alpha
    elif link_beta == 'paper_literal':
        beta = params.ke0 / 60.0 * alpha
    else:
        raise ParameterError('unknown link_beta %r' % (link_beta,))
    if link_input == 'concentration':
        beta /= rates.v1
    elif link_input != 'amount':
        raise ParameterError('unknown link_input %r' % (link_input,))

    model = DiscretePatientModel(
        a_matrix=a_matrix, b_vector=b_vector, alpha=alpha, beta=beta,
        gamma=params.gamma, c50=params.c50, delta_t=delta_t, rates=rates)
    logger.debug('built %s model for %r', discretization, params)
    return model


def step_patient(model, state, action):
    """Advance the patient one step under a normalized infusion in [0, 1].

    The effect site sees the central amount of the previous step, so a
    bolus reaches it one step late.
    """
    x = model.a_matrix.dot(state.x) + model.b_vector * action
    x_e = model.alpha * state.x_e + model.beta * state.x[0]
    return PatientState(x, x_e, state.k + 1)


def hill_response(x_e, gamma, c50):
    """LoU in [0, 1] for effect-site level ``x_e``."""
    with np.errstate(over='ignore', invalid='ignore'):
        ratio = np.power(np.divide(x_e, c50), gamma)
        # an overflowing ratio means full effect
        y = np.where(np.isinf(ratio), 1.0, ratio / (1.0 + ratio))
    return y if np.ndim(y) else float(y)


def _clip_unit(values):
    clipped = np.clip(values, 0.0, 1.0)
    return clipped if np.ndim(clipped) else float(clipped)


def measure(y, model, rng):
    """Noisy LoU reading clipped to [0, 1]."""
    noise = model.sample_noise(rng, np.shape(y))
    return _clip_unit(y + noise)


def sample_patient(rng, ranges=DEFAULT_RANGES):
    """Draw a patient uniformly over ``ranges``.

    The draw order is fixed so a seeded generator always yields the same
    patient.
    """
    def draw(name):
        r = getattr(ranges, name)
        return float(rng.uniform(r.min, r.max))

    height = draw('height')
    weight = draw('weight')
    age = draw('age')
    ke0 = draw('ke0')
    gamma = draw('gamma')
    c50 = draw('c50')
    sex = ranges.sex
    if ranges.randomize_sex:
        sex = FEMALE if rng.random() < 0.5 else MALE
    return PatientParams(
        PatientDemographics(age=age, height=height, weight=weight, sex=sex),
        ke0=ke0, gamma=gamma, c50=c50)
