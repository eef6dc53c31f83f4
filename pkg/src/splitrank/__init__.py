"""Split-inference two-tower ranking: train once, serve across frontend,
offline indexer and searcher shards."""

from .broker import Broker, merge
from .embedstore import EmbeddingDictionary, build_dictionary, coverage, load_dictionary, save_dictionary
from .errors import (BrokerError, BuildError, ConfigError, FormatError, InputError, SplitRankError,
                     TrainingError, VersionError)
from .estimator import TwoTowerRanker
from .features import MemberProfile, QueryFeatures, parse_query
from .frontend import Frontend, build_query_representation
from .indexer import build_shards, compute_member_vectors, dequantize, ingest_members, quantize
from .nncore import (ArmSpec, CrossSpec, FieldSpec, ModelSpec, TrainExample, TwoTowerModel, embed_pool,
                     forward_arm, grad_check, load_model, save_model, score_pair, similarity, train)
from .searcher import SearcherNode, SearchRequest, ShardSnapshot, apply_live_update, load_shard, retrieve, search
from .splitter import ModelVersion, load_bundle, save_bundle, split
from .vocab import Vocabulary

__version__ = "0.1.0"
