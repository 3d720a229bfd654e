#pragma once

#include <memory>
#include <optional>

#include "cidet/data.hpp"
#include "cidet/nn.hpp"

namespace cidet {

struct DetectorConfig {
  int num_queries = 24;
  int num_decoder_layers = 6;
  int num_encoder_layers = 1;
  int num_classes = 1;  // background is column num_classes
  int hidden = 64;
  int heads = 4;
  int ffn = 256;
  int patch = 8;
  int canvas = 64;
  double background_weight = 0.1;

  void validate() const;
  int background_column() const { return num_classes; }
};

// Per-decoder-layer classification scores and box regressions. Scores
// are post-softmax rows over C+1 columns (background last); logits are
// kept alongside for distillation in logit space and for head-widening
// checks. Boxes are sigmoid outputs in (cx, cy, w, h) form.
struct DetectorOutput {
  int layers = 0, queries = 0, num_classes = 0;
  std::vector<nn::Mat> scores;  // layer -> Q x (C+1)
  std::vector<nn::Mat> logits;  // layer -> Q x (C+1)
  std::vector<nn::Mat> boxes;   // layer -> Q x 4, cxcywh
};

Box box_from_cxcywh(const double* cxcywh);
void box_to_cxcywh(const Box& b, double* out);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query index, target index)
  std::vector<int> unmatched_queries;
};

struct MatchWeights {
  double w_cls = 1.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
};

double giou(const Box& a, const Box& b);

// Minimum-cost assignment of targets to distinct queries; globally
// optimal. cost(q,t) = w_cls*(1 - score[q][class_t]) + w_l1*L1 + w_giou*(1-GIoU).
MatchResult hungarian_match(const nn::Mat& cls_scores, const nn::Mat& boxes_cxcywh,
                            const AnnotationSet& targets, const MatchWeights& w);

// Generic rectangular assignment: rows <= cols, returns col index per row.
std::vector<int> solve_assignment(const nn::Mat& cost);

struct LossBreakdown {
  double total = 0;
  double cls = 0;
  double l1 = 0;
  double giou = 0;
};

struct Detection {
  int class_id;
  Box box;
  double score;
};

struct LoadedDetector;

class DetectorModel {
 public:
  struct ForwardCache;

  static DetectorModel init(const DetectorConfig& cfg, uint64_t seed);

  DetectorOutput forward(const ImageRecord& image) const;
  DetectorOutput forward(const ImageRecord& image, ForwardCache& cache) const;

  // dlogits / dboxes: per-layer gradients w.r.t. pre-softmax logits and
  // post-sigmoid boxes. Accumulates into parameter grads.
  void backward(const ForwardCache& cache,
                const std::vector<nn::Mat>& dlogits,
                const std::vector<nn::Mat>& dboxes);

  std::vector<nn::Param*> params();
  const DetectorConfig& config() const { return cfg_; }

  // Head surgery: adds class columns while keeping background last; old
  // class rows and the background row are copied bit-exactly.
  DetectorModel widen(int new_num_classes, uint64_t seed) const;

  uint64_t param_hash() const;

  void save(const std::string& path, const std::vector<ClassId>& catalog,
            const std::vector<int>& head_columns,
            const std::vector<int>& old_classes,
            const std::vector<int>& new_classes) const;
  static LoadedDetector load(const std::string& path);

  DetectorModel() = default;  // empty shell; use init() or load()
  DetectorModel(const DetectorModel&) = default;
  DetectorModel& operator=(const DetectorModel&) = default;
  DetectorModel(DetectorModel&&) = default;
  DetectorModel& operator=(DetectorModel&&) = default;

 private:

  DetectorConfig cfg_;
  nn::Linear patch_embed_;
  nn::Param pos_embed_;    // S x d
  nn::Param query_embed_;  // Q x d

  struct EncoderLayer {
    nn::Mha self;
    nn::LayerNorm ln1;
    nn::Ffn ffn;
    nn::LayerNorm ln2;
  };
  struct DecoderLayer {
    nn::Mha self;
    nn::LayerNorm ln1;
    nn::Mha cross;
    nn::LayerNorm ln2;
    nn::Ffn ffn;
    nn::LayerNorm ln3;
  };
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  nn::LayerNorm enc_norm_;
  nn::LayerNorm dec_norm_;
  nn::Linear cls_head_;
  nn::Linear box_head1_, box_head2_;
  nn::Param box_ref_;  // per-query box prior, pre-sigmoid (Q x 4)

  nn::Mat tokens_from_image(const ImageRecord& image) const;
};

struct LoadedDetector {
  DetectorModel model;
  std::vector<ClassId> catalog;
  std::vector<int> head_columns;  // class id per head column
  std::vector<int> old_classes;
  std::vector<int> new_classes;
};

struct DetectorModel::ForwardCache {
  nn::Mat tokens;  // S x P
  struct EncCache {
    nn::LayerNorm::Cache ln1;
    nn::Mha::Cache self;
    nn::LayerNorm::Cache ln2;
    nn::Ffn::Cache ffn;
  };
  struct DecCache {
    nn::LayerNorm::Cache ln1;
    nn::Mha::Cache self;
    nn::LayerNorm::Cache ln2;
    nn::Mha::Cache cross;
    nn::LayerNorm::Cache ln3;
    nn::Ffn::Cache ffn;
    nn::Mat out;  // Q x d raw layer output (pre dec-norm)
  };
  std::vector<EncCache> enc;
  nn::LayerNorm::Cache enc_norm;
  nn::Mat memory;      // S x d
  nn::Mat memory_pos;  // memory + positional embedding
  std::vector<DecCache> dec;
  std::vector<nn::LayerNorm::Cache> dec_norm;
  std::vector<nn::Mat> head_in;     // per layer, dec-norm output
  std::vector<nn::Mat> box_hidden;  // per layer, post-ReLU
  std::vector<nn::Mat> box_sig;     // per layer, sigmoid outputs
};

// Computes L_DETR on a full per-layer output: per layer, Hungarian match
// then weighted NLL + L1 + (1 - GIoU); mean over layers.
LossBreakdown detr_loss(const DetectorOutput& out, const AnnotationSet& targets,
                        const MatchWeights& w, double background_weight);

// Same, also emitting gradients w.r.t. logits and sigmoid box outputs.
LossBreakdown detr_loss_with_grads(const DetectorOutput& out,
                                   const AnnotationSet& targets,
                                   const MatchWeights& w,
                                   double background_weight,
                                   std::vector<nn::Mat>& dlogits,
                                   std::vector<nn::Mat>& dboxes);

// Final-layer detections: per query, argmax over all C+1 columns; emit
// when the argmax is not background and its score >= threshold.
std::vector<Detection> predict(const DetectorOutput& out, double threshold);
std::vector<Detection> predict(const DetectorModel& model,
                               const ImageRecord& image, double threshold);

// Shared row rule used by predict and pseudo-labeling.
std::optional<std::pair<int, double>> top_non_background(const double* row,
                                                         int columns,
                                                         int background_column,
                                                         double threshold);

}  // namespace cidet
