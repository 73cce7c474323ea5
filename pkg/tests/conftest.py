"""Pytest configuration and fixtures for speaker-inventory separation tests."""
import pytest
import sys
import os
import tempfile

import numpy as np

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def temp_db_path():
    """Create a temporary database file path."""
    with tempfile.NamedTemporaryFile(suffix='.db', delete=False) as f:
        temp_path = f.name
    yield temp_path
    # Cleanup
    if os.path.exists(temp_path):
        os.unlink(temp_path)


@pytest.fixture
async def database(temp_db_path):
    """Create a test results database with initialized tables."""
    from database import ResultsDatabase

    db = ResultsDatabase(db_path=temp_db_path)
    await db.init_db()
    yield db


@pytest.fixture(scope='session')
def two_speaker_recording():
    """20 s two-speaker recording without reverb or noise."""
    from simulator import generate_recording

    return generate_recording(2, 20.0, 0.3, seed=11, snr_db_range=None, rt60_range=None)


@pytest.fixture(scope='session')
def noisy_recording():
    """20 s two-speaker recording with the default reverb and noise ranges."""
    from simulator import generate_recording

    return generate_recording(2, 20.0, 0.3, seed=5)


@pytest.fixture(scope='session')
def voices():
    """Four seconds of speech for speakers 0 to 3."""
    from simulator import synth_speaker

    return {speaker: synth_speaker(speaker, 4.0, seed=3) for speaker in range(4)}
