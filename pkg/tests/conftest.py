import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from app.main import app
from app.database import Base, get_db
from app.config import build_config, parse_config_text
from app.services.dataset import generate_dataset, write_dataset

# Create test database
TEST_DATABASE_URL = "sqlite:///./test_latent_bench.db"
test_engine = create_engine(TEST_DATABASE_URL, connect_args={"check_same_thread": False})
TestSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=test_engine)

# Small enough that a full train + evaluate cycle takes seconds
TINY_CONFIG = """
# toy bench
strategy = baseline
horizon = 4
tokens_per_step = 4
seeds = 0
train_steps = 3
batch_size = 8
log_every = 1
eval_episodes = 1
lr_decay_steps = 2

env.tasks = reach, pick_place
env.n_demos = 2

action_lam.latent_dim = 16
action_lam.codebook_size = 16
action_lam.heads = 2
action_lam.transformer_layers = 1
action_lam.ff_dim = 32
action_lam.decoder_hidden = 32
action_lam.batch_size = 8
action_lam.train_steps = 2
action_lam.log_every = 1

image_lam.latent_dim = 8
image_lam.hidden = 16
image_lam.action_hidden = 16
image_lam.batch_size = 8
image_lam.train_steps = 2
image_lam.log_every = 1

backbone.layers = 2
backbone.hidden = 16
backbone.heads = 2
backbone.ff_dim = 32
backbone.head_hidden = 32
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def override_get_db():
    """Override database dependency for testing"""
    db = TestSessionLocal()
    try:
        yield db
    finally:
        db.close()


@pytest.fixture(scope="function")
def test_db():
    """Create test database and drop after test"""
    Base.metadata.create_all(bind=test_engine)
    yield
    Base.metadata.drop_all(bind=test_engine)


@pytest.fixture(scope="function")
def client(test_db):
    """Create test client with test database"""
    app.dependency_overrides[get_db] = override_get_db
    with TestClient(app) as test_client:
        yield test_client
    app.dependency_overrides.clear()


@pytest.fixture(scope="function")
def session_factory(test_db):
    """Session factory bound to the test registry"""
    return TestSessionLocal


@pytest.fixture
def tiny_config_text():
    return TINY_CONFIG


@pytest.fixture
def tiny_config(tmp_path):
    """Toy-scale RunConfig writing into tmp_path"""
    entries = parse_config_text(TINY_CONFIG)
    entries["output_dir"] = str(tmp_path / "out")
    return build_config(entries)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two demonstrations each of reach and pick_place"""
    return generate_dataset(["reach", "pick_place"], n_demos=2, seed=0, image_size=16)


@pytest.fixture(scope="session")
def tiny_dataset_path(tmp_path_factory, tiny_dataset):
    path = tmp_path_factory.mktemp("data") / "dataset.lads"
    write_dataset(path, tiny_dataset)
    return path
