from .knn import KNNFingerprintRegressor, fingerprint_matrix, knn_predict
from .layers import GATConv, GCNConv, HeteroConv, Linear, MLP, gat_attention, hetero_conv, readout, weighted_gcn_layer
from .nets import (
    DeepNNNet,
    DeepSetsNet,
    GraphNet,
    LocalizationNet,
    build_net,
    deep_nn_forward,
    deep_sets_forward,
    net_from_meta,
    widagcn_forward,
)
from .estimators import (
    ESTIMATORS,
    DeepNNRegressor,
    DeepSetsRegressor,
    GCNRegressor,
    WiAGCNRegressor,
    WiDAGCNRegressor,
)
