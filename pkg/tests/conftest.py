import numpy as np
import pytest

from rdassoc import (
    Detection,
    NoiseModel,
    ObservationSet,
    SensorArray,
    range_doppler_transform,
)


@pytest.fixture
def array6():
    return SensorArray.uniform(6, 4.0)


@pytest.fixture
def array4():
    return SensorArray.uniform(4, 4.0)


@pytest.fixture
def nominal_noise():
    return NoiseModel.from_snr(-10.0)


def exact_observations(targets, array, rng_seed=0):
    """Noise-free observation set (shuffled detection order, labeled)."""
    from rdassoc import simulate_observations

    return simulate_observations(targets, array,
                                 NoiseModel(sigma_r=0.0, sigma_d=0.0),
                                 rng_seed=rng_seed)


def exact_chain_detections(state, array):
    """The detections a single target would produce, one per sensor."""
    dets = []
    for i, l in enumerate(array.positions):
        r, d = range_doppler_transform(state, l)
        dets.append(Detection(range_m=r, doppler=d, sensor_index=i))
    return tuple(dets)


def label_of(obs: ObservationSet, det: Detection) -> int:
    col = obs.detections[det.sensor_index]
    for k, cand in enumerate(col):
        if cand is det or (cand.range_m == det.range_m and cand.doppler == det.doppler):
            return obs.truth_labels[det.sensor_index][k]
    raise AssertionError("detection not found in observation set")


def chain_labels(obs, chain):
    return tuple(label_of(obs, det) for det in chain.detections)
