"""HTTP Trojan traffic detection with hierarchical spatiotemporal features.

Pipeline: pcap captures -> reassembled TCP streams -> HTTP flows -> raw byte
matrices plus packet/flow statistics -> CNN+LSTM classifier, with a seeded
synthetic traffic generator and an experiment harness around it.
"""

from .capture import (CaptureError, DirectionStream, MalformedHeader, RawPacket,
                      TcpSegment, TcpStreamPair, TruncatedHeader, UnsupportedLinkType,
                      UnsupportedMagic, decode_segment, read_capture, reassemble,
                      write_capture)
from .http_flow import (EmptyFlow, Flow, HttpMessage, LABEL_BENIGN, LABEL_MALICIOUS,
                        LABEL_UNLABELED, MalformedMessage, MaskConfig, build_flow,
                        flow_from_json, flow_to_json, mask_flow, mask_value,
                        parse_messages, read_flows, serialize_message, write_flows)
from .features import (EncodedFlow, FL_SIZE, FLOW_CAP, MATRIX_COLS, MATRIX_ROWS,
                       NormalizationStats, PL_SIZE, build_fl, build_pl,
                       encode_field_line, encode_flow, encode_packet_raw,
                       load_dataset, normalize_features, save_dataset)
from .nn import (ConvLayer, DenseLayer, LstmCell, LstmState, Optimizer,
                 OptimizerConfig, ShapeMismatch, bce_with_logits, conv_forward,
                 dense_forward, finite_diff_check, lstm_step, lstm_zero_state,
                 max_pool, optimizer_step)
from .model import (ConfigMismatch, ConvSpec, CorruptFile, HstfConfig, HstfModel,
                    SingleClassDataset, TrainHistory, VersionMismatch, load_model,
                    predict, predict_scores, save_model, train)
from .generator import (GeneratorProfile, corpus_stats, default_benign_profile,
                        default_trojan_profile, flow_to_segments, flows_to_pcap,
                        generate_corpus, generate_flow, profile_hash)
from .experiments import (AblationRun, EvalResult, InsufficientData, LengthMismatch,
                          Metrics, ProportionSpec, compute_metrics, curves_csv,
                          f_beta, make_split, metrics_table_csv, run_ablation,
                          run_imbalance, run_sweep, train_eval)

__version__ = "0.1.0"
