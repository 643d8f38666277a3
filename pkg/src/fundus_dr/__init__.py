"""Small-data diabetic retinopathy screening on a frozen Inception-V3 backbone.

Pipeline: stratified split -> fundus preprocessing -> frozen feature
extraction (cached) -> ReLU/softmax head trained with cosine loss -> report.
The estimators compose with scikit-learn pipelines::

    from sklearn.pipeline import make_pipeline
    model = make_pipeline(FundusPreprocessor(), BackboneFeatureExtractor("mock"),
                          CosineHeadClassifier())
"""

from .backbone import (
    BackboneFeatureExtractor,
    FeatureCache,
    extract_features,
    load_backbone,
    mock_backbone,
    read_cache,
    write_cache,
)
from .dataset import (
    BinaryLabel,
    ImageRecord,
    SplitManifest,
    SplitSpec,
    binarize,
    load_label_manifest,
    load_manifest,
    save_manifest,
    stratified_subsample,
)
from .evaluate import EvalReport, confusion, metrics, parse_report, predict, render_report
from .head import (
    CosineHeadClassifier,
    HeadParams,
    TrainConfig,
    batch_gradient,
    cosine_loss,
    fit_head,
    forward,
    init_head,
    load_head,
    lr_schedule,
    save_head,
    train_head,
)
from .preprocess import FundusPreprocessor, PreprocessConfig, preprocess_image

__version__ = "0.1.0"
