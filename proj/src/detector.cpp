#include "cidet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "cidet/kernels.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace cidet {

void DetectorConfig::validate() const {
  if (num_queries < 1 || num_decoder_layers < 1 || num_classes < 1)
    throw ConfigError("detector config: queries, layers and classes must be >= 1");
  if (hidden < 1 || heads < 1 || hidden % heads != 0)
    throw ConfigError("detector config: hidden must be divisible by heads");
  if (canvas % patch != 0)
    throw ConfigError("detector config: canvas must be divisible by patch size");
}

Box box_from_cxcywh(const double* p) {
  double cx = p[0], cy = p[1], w = p[2], h = p[3];
  Box b;
  b.x_min = std::clamp(cx - w / 2, 0.0, 1.0);
  b.y_min = std::clamp(cy - h / 2, 0.0, 1.0);
  b.x_max = std::clamp(cx + w / 2, 0.0, 1.0);
  b.y_max = std::clamp(cy + h / 2, 0.0, 1.0);
  if (b.x_max <= b.x_min) {
    double mid = std::clamp((b.x_min + b.x_max) / 2, 1e-6, 1.0 - 1e-6);
    b.x_min = mid - 5e-7;
    b.x_max = mid + 5e-7;
  }
  if (b.y_max <= b.y_min) {
    double mid = std::clamp((b.y_min + b.y_max) / 2, 1e-6, 1.0 - 1e-6);
    b.y_min = mid - 5e-7;
    b.y_max = mid + 5e-7;
  }
  return b;
}

void box_to_cxcywh(const Box& b, double* out) {
  out[0] = (b.x_min + b.x_max) / 2;
  out[1] = (b.y_min + b.y_max) / 2;
  out[2] = b.x_max - b.x_min;
  out[3] = b.y_max - b.y_min;
}

double giou(const Box& a, const Box& b) {
  double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  double hull_w = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
  double hull_h = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
  double hull = hull_w * hull_h;
  double iou_v = uni > 0 ? inter / uni : 0.0;
  return hull > 0 ? iou_v - (hull - uni) / hull : iou_v;
}

namespace {

// d(GIoU(a, b))/d(a corners), b fixed. Piecewise-smooth; tie points take
// the one-sided derivative.
void giou_grad(const Box& a, const Box& b, double grad[4]) {
  double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  bool overlap = iw > 0 && ih > 0;
  double inter = overlap ? iw * ih : 0.0;
  double uni = a.area() + b.area() - inter;
  double hull_w = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
  double hull_h = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
  double hull = hull_w * hull_h;

  // dI/d corners
  double dI[4] = {0, 0, 0, 0};
  if (overlap) {
    dI[0] = (a.x_min > b.x_min) ? -ih : 0.0;
    dI[2] = (a.x_max < b.x_max) ? ih : 0.0;
    dI[1] = (a.y_min > b.y_min) ? -iw : 0.0;
    dI[3] = (a.y_max < b.y_max) ? iw : 0.0;
  }
  // d(area a)/d corners
  double dA[4] = {-(a.y_max - a.y_min), -(a.x_max - a.x_min),
                  (a.y_max - a.y_min), (a.x_max - a.x_min)};
  // d hull
  double dH[4] = {0, 0, 0, 0};
  dH[0] = (a.x_min < b.x_min) ? -hull_h : 0.0;
  dH[2] = (a.x_max > b.x_max) ? hull_h : 0.0;
  dH[1] = (a.y_min < b.y_min) ? -hull_w : 0.0;
  dH[3] = (a.y_max > b.y_max) ? hull_w : 0.0;

  for (int k = 0; k < 4; ++k) {
    double dU = dA[k] - dI[k];
    double dIoU = uni > 0 ? (dI[k] * uni - inter * dU) / (uni * uni) : 0.0;
    double dPen = hull > 0 ? -(dU * hull - uni * dH[k]) / (hull * hull) : 0.0;
    grad[k] = dIoU - dPen;
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

std::vector<int> solve_assignment(const nn::Mat& cost) {
  const int n = cost.rows, m = cost.cols;
  if (n > m) throw ConfigError("assignment expects rows <= cols");
  // Shortest augmenting path with potentials (Jonker-Volgenant style),
  // 1-indexed internally.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

MatchResult hungarian_match(const nn::Mat& cls_scores, const nn::Mat& boxes_cxcywh,
                            const AnnotationSet& targets, const MatchWeights& w) {
  const int q_count = cls_scores.rows;
  const int t_count = static_cast<int>(targets.instances.size());
  MatchResult res;
  if (t_count == 0) {
    for (int q = 0; q < q_count; ++q) res.unmatched_queries.push_back(q);
    return res;
  }

  // cost matrix rows = targets (rows <= cols after capping).
  const int rows = std::min(t_count, q_count);
  nn::Mat cost(rows <= q_count ? rows : q_count, q_count);
  std::vector<Box> pred_boxes(q_count);
  for (int q = 0; q < q_count; ++q) pred_boxes[q] = box_from_cxcywh(boxes_cxcywh.row(q));

  auto pair_cost = [&](int t, int q) {
    const Instance& tgt = targets.instances[t];
    double tb[4];
    box_to_cxcywh(tgt.box, tb);
    double l1 = 0;
    for (int k = 0; k < 4; ++k) l1 += std::abs(boxes_cxcywh.at(q, k) - tb[k]);
    double g = giou(pred_boxes[q], tgt.box);
    double cls = 1.0 - cls_scores.at(q, tgt.class_id);
    return w.w_cls * cls + w.w_l1 * l1 + w.w_giou * (1.0 - g);
  };

  std::vector<int> assign;
  if (t_count <= q_count) {
    nn::Mat c(t_count, q_count);
    for (int t = 0; t < t_count; ++t)
      for (int q = 0; q < q_count; ++q) c.at(t, q) = pair_cost(t, q);
    assign = solve_assignment(c);
    for (int t = 0; t < t_count; ++t) res.pairs.push_back({assign[t], t});
  } else {
    nn::Mat c(q_count, t_count);
    for (int q = 0; q < q_count; ++q)
      for (int t = 0; t < t_count; ++t) c.at(q, t) = pair_cost(t, q);
    assign = solve_assignment(c);
    for (int q = 0; q < q_count; ++q) res.pairs.push_back({q, assign[q]});
  }
  std::sort(res.pairs.begin(), res.pairs.end());
  std::vector<char> matched(q_count, 0);
  for (auto& [q, t] : res.pairs) matched[q] = 1;
  for (int q = 0; q < q_count; ++q)
    if (!matched[q]) res.unmatched_queries.push_back(q);
  return res;
}

// ---------------------------------------------------------------------------
// Model

DetectorModel DetectorModel::init(const DetectorConfig& cfg, uint64_t seed) {
  cfg.validate();
  DetectorModel m;
  m.cfg_ = cfg;
  Rng rng(Rng::derive(seed, "detector-init"));
  const int d = cfg.hidden;
  const int grid = cfg.canvas / cfg.patch;
  const int S = grid * grid;
  const int P = cfg.patch * cfg.patch * 3;

  m.patch_embed_.init("patch_embed", P, d, rng);
  m.pos_embed_.name = "pos_embed";
  m.pos_embed_.value = nn::Mat(S, d);
  m.pos_embed_.init_normal(rng, 1.0);
  m.query_embed_.name = "query_embed";
  m.query_embed_.value = nn::Mat(cfg.num_queries, d);
  m.query_embed_.init_normal(rng, 1.0);

  m.encoder_.resize(cfg.num_encoder_layers);
  for (int l = 0; l < cfg.num_encoder_layers; ++l) {
    std::string base = "enc" + std::to_string(l);
    m.encoder_[l].self.init(base + ".self", d, cfg.heads, rng);
    m.encoder_[l].ln1.init(base + ".ln1", d);
    m.encoder_[l].ffn.init(base + ".ffn", d, cfg.ffn, rng);
    m.encoder_[l].ln2.init(base + ".ln2", d);
  }
  m.decoder_.resize(cfg.num_decoder_layers);
  for (int l = 0; l < cfg.num_decoder_layers; ++l) {
    std::string base = "dec" + std::to_string(l);
    m.decoder_[l].self.init(base + ".self", d, cfg.heads, rng);
    m.decoder_[l].ln1.init(base + ".ln1", d);
    m.decoder_[l].cross.init(base + ".cross", d, cfg.heads, rng);
    m.decoder_[l].ln2.init(base + ".ln2", d);
    m.decoder_[l].ffn.init(base + ".ffn", d, cfg.ffn, rng);
    m.decoder_[l].ln3.init(base + ".ln3", d);
  }
  m.enc_norm_.init("enc_norm", d);
  m.dec_norm_.init("dec_norm", d);
  m.cls_head_.init("cls_head", d, cfg.num_classes + 1, rng);
  m.box_head1_.init("box_head1", d, d, rng);
  m.box_head2_.init("box_head2", d, 4, rng);

  // Per-query box priors: centers spread over a grid, mid-sized extent.
  // Stored pre-sigmoid; the box head learns offsets around them.
  m.box_ref_.name = "box_ref";
  m.box_ref_.value = nn::Mat(cfg.num_queries, 4);
  m.box_ref_.grad = nn::Mat(cfg.num_queries, 4);
  const int grid_n = static_cast<int>(std::ceil(std::sqrt(cfg.num_queries)));
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  for (int q = 0; q < cfg.num_queries; ++q) {
    double gx = (q % grid_n + 0.5) / grid_n;
    double gy = (q / grid_n + 0.5) / grid_n;
    m.box_ref_.value.at(q, 0) = logit(std::clamp(gx, 0.1, 0.9));
    m.box_ref_.value.at(q, 1) = logit(std::clamp(gy, 0.1, 0.9));
    m.box_ref_.value.at(q, 2) = logit(0.25);
    m.box_ref_.value.at(q, 3) = logit(0.25);
  }
  return m;
}

std::vector<nn::Param*> DetectorModel::params() {
  std::vector<nn::Param*> out;
  patch_embed_.collect(out);
  out.push_back(&pos_embed_);
  out.push_back(&query_embed_);
  for (auto& e : encoder_) {
    e.self.collect(out);
    e.ln1.collect(out);
    e.ffn.collect(out);
    e.ln2.collect(out);
  }
  for (auto& dlayer : decoder_) {
    dlayer.self.collect(out);
    dlayer.ln1.collect(out);
    dlayer.cross.collect(out);
    dlayer.ln2.collect(out);
    dlayer.ffn.collect(out);
    dlayer.ln3.collect(out);
  }
  enc_norm_.collect(out);
  dec_norm_.collect(out);
  cls_head_.collect(out);
  box_head1_.collect(out);
  box_head2_.collect(out);
  out.push_back(&box_ref_);
  return out;
}

nn::Mat DetectorModel::tokens_from_image(const ImageRecord& image) const {
  if (image.height != cfg_.canvas || image.width != cfg_.canvas ||
      image.channels != 3)
    throw ConfigError("image size " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) +
                      " does not match detector canvas " +
                      std::to_string(cfg_.canvas));
  const int grid = cfg_.canvas / cfg_.patch;
  const int S = grid * grid;
  const int P = cfg_.patch * cfg_.patch * 3;
  nn::Mat tokens(S, P);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      double* row = tokens.row(gy * grid + gx);
      int k = 0;
      for (int py = 0; py < cfg_.patch; ++py) {
        for (int px = 0; px < cfg_.patch; ++px) {
          int r = gy * cfg_.patch + py, c = gx * cfg_.patch + px;
          size_t base = (static_cast<size_t>(r) * image.width + c) * 3;
          for (int ch = 0; ch < 3; ++ch)
            row[k++] = static_cast<double>(image.pixels[base + ch]) - 0.5;
        }
      }
    }
  }
  return tokens;
}

DetectorOutput DetectorModel::forward(const ImageRecord& image) const {
  ForwardCache cache;
  return forward(image, cache);
}

namespace {

inline nn::Mat add(const nn::Mat& a, const nn::Mat& b) {
  nn::Mat out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

inline void add_into(nn::Mat& a, const nn::Mat& b) {
  for (size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

}  // namespace

// Pre-norm blocks with positional embeddings injected into the
// attention addresses (q, k) at every layer; queries start at zero and
// the learned query embedding serves as their positional code.
DetectorOutput DetectorModel::forward(const ImageRecord& image,
                                      ForwardCache& cache) const {
  cache.tokens = tokens_from_image(image);
  nn::Mat x = patch_embed_.forward(cache.tokens);

  cache.enc.resize(encoder_.size());
  for (size_t l = 0; l < encoder_.size(); ++l) {
    const EncoderLayer& layer = encoder_[l];
    auto& c = cache.enc[l];
    nn::Mat t = layer.ln1.forward(x, c.ln1);
    nn::Mat qk = add(t, pos_embed_.value);
    nn::Mat attn = layer.self.forward(qk, qk, t, c.self);
    add_into(x, attn);
    nn::Mat u = layer.ln2.forward(x, c.ln2);
    nn::Mat f = layer.ffn.forward(u, c.ffn);
    add_into(x, f);
  }
  cache.memory = enc_norm_.forward(x, cache.enc_norm);
  cache.memory_pos = add(cache.memory, pos_embed_.value);

  DetectorOutput out;
  out.layers = cfg_.num_decoder_layers;
  out.queries = cfg_.num_queries;
  out.num_classes = cfg_.num_classes;

  nn::Mat h(cfg_.num_queries, cfg_.hidden);  // queries start at zero
  cache.dec.resize(decoder_.size());
  cache.dec_norm.resize(decoder_.size());
  cache.box_hidden.resize(decoder_.size());
  cache.box_sig.resize(decoder_.size());
  for (size_t l = 0; l < decoder_.size(); ++l) {
    const DecoderLayer& layer = decoder_[l];
    auto& c = cache.dec[l];
    nn::Mat t = layer.ln1.forward(h, c.ln1);
    nn::Mat qk = add(t, query_embed_.value);
    nn::Mat attn = layer.self.forward(qk, qk, t, c.self);
    add_into(h, attn);

    nn::Mat t2 = layer.ln2.forward(h, c.ln2);
    nn::Mat qc = add(t2, query_embed_.value);
    nn::Mat attn2 =
        layer.cross.forward(qc, cache.memory_pos, cache.memory, c.cross);
    add_into(h, attn2);

    nn::Mat t3 = layer.ln3.forward(h, c.ln3);
    nn::Mat f = layer.ffn.forward(t3, c.ffn);
    add_into(h, f);
    c.out = h;

    nn::Mat z = dec_norm_.forward(h, cache.dec_norm[l]);
    nn::Mat logits = cls_head_.forward(z);
    nn::Mat scores = logits;
    nn::softmax_rows(scores);
    nn::Mat bh = box_head1_.forward(z);
    for (double& v : bh.v) v = v > 0 ? v : 0.0;
    cache.box_hidden[l] = bh;
    cache.head_in.push_back(z);
    nn::Mat braw = box_head2_.forward(bh);
    add_into(braw, box_ref_.value);
    for (double& v : braw.v) v = 1.0 / (1.0 + std::exp(-v));
    cache.box_sig[l] = braw;

    out.logits.push_back(std::move(logits));
    out.scores.push_back(std::move(scores));
    out.boxes.push_back(cache.box_sig[l]);
  }
  return out;
}

void DetectorModel::backward(const ForwardCache& cache,
                             const std::vector<nn::Mat>& dlogits,
                             const std::vector<nn::Mat>& dboxes) {
  const int L = cfg_.num_decoder_layers;
  if (static_cast<int>(dlogits.size()) != L ||
      static_cast<int>(dboxes.size()) != L)
    throw ConfigError("backward: gradient layer count mismatch");

  nn::Mat dmem(cache.memory.rows, cache.memory.cols);

  // Head gradients land on the (shared) decoder output norm of layer l
  // and flow back to the layer's raw output.
  auto head_grads = [&](int l) {
    const nn::Mat& z = cache.head_in[l];
    nn::Mat dz = cls_head_.backward(z, dlogits[l]);
    const nn::Mat& sig = cache.box_sig[l];
    nn::Mat draw(sig.rows, sig.cols);
    for (size_t i = 0; i < sig.v.size(); ++i)
      draw.v[i] = dboxes[l].v[i] * sig.v[i] * (1.0 - sig.v[i]);
    add_into(box_ref_.grad, draw);
    nn::Mat dbh = box_head2_.backward(cache.box_hidden[l], draw);
    for (size_t i = 0; i < dbh.v.size(); ++i)
      if (cache.box_hidden[l].v[i] <= 0.0) dbh.v[i] = 0.0;
    add_into(dz, box_head1_.backward(z, dbh));
    return dec_norm_.backward(cache.dec_norm[l], dz);
  };

  nn::Mat g = head_grads(L - 1);
  for (int l = L - 1; l >= 0; --l) {
    DecoderLayer& layer = decoder_[l];
    const auto& c = cache.dec[l];

    // out = h2 + ffn(ln3(h2))
    nn::Mat dt3 = layer.ffn.backward(c.ffn, g);
    nn::Mat dh2 = g;
    add_into(dh2, layer.ln3.backward(c.ln3, dt3));

    // h2 = h1 + cross(t2 + query_embed, memory + pos, memory)
    nn::Mat dkc(dmem.rows, dmem.cols);
    nn::Mat dvc(dmem.rows, dmem.cols);
    nn::Mat dqc = layer.cross.backward(c.cross, dh2, dkc, dvc);
    add_into(dmem, dkc);
    add_into(dmem, dvc);
    for (size_t i = 0; i < dkc.v.size(); ++i) pos_embed_.grad.v[i] += dkc.v[i];
    for (size_t i = 0; i < dqc.v.size(); ++i)
      query_embed_.grad.v[i] += dqc.v[i];
    nn::Mat dh1 = dh2;
    add_into(dh1, layer.ln2.backward(c.ln2, dqc));

    // h1 = h + self(t + query_embed, t + query_embed, t)
    nn::Mat dk(cfg_.num_queries, cfg_.hidden);
    nn::Mat dv(cfg_.num_queries, cfg_.hidden);
    nn::Mat dqs = layer.self.backward(c.self, dh1, dk, dv);
    for (size_t i = 0; i < dqs.v.size(); ++i)
      query_embed_.grad.v[i] += dqs.v[i] + dk.v[i];
    nn::Mat dt = dqs;
    add_into(dt, dk);
    add_into(dt, dv);
    nn::Mat dh = dh1;
    add_into(dh, layer.ln1.backward(c.ln1, dt));

    if (l > 0) {
      g = head_grads(l - 1);
      add_into(g, dh);
    }
    // Layer 0's input is the constant zero matrix; nothing to propagate.
  }

  // memory = enc_norm(x); the +pos contributions were folded in above.
  nn::Mat dx = enc_norm_.backward(cache.enc_norm, dmem);
  for (int l = static_cast<int>(encoder_.size()) - 1; l >= 0; --l) {
    EncoderLayer& layer = encoder_[l];
    const auto& c = cache.enc[l];
    nn::Mat du = layer.ffn.backward(c.ffn, dx);
    add_into(dx, layer.ln2.backward(c.ln2, du));

    nn::Mat dk(dx.rows, dx.cols);
    nn::Mat dv(dx.rows, dx.cols);
    nn::Mat dq = layer.self.backward(c.self, dx, dk, dv);
    for (size_t i = 0; i < dq.v.size(); ++i)
      pos_embed_.grad.v[i] += dq.v[i] + dk.v[i];
    nn::Mat dt = dq;
    add_into(dt, dk);
    add_into(dt, dv);
    add_into(dx, layer.ln1.backward(c.ln1, dt));
  }
  patch_embed_.backward(cache.tokens, dx);
}

DetectorModel DetectorModel::widen(int new_num_classes, uint64_t seed) const {
  if (new_num_classes < cfg_.num_classes)
    throw ConfigError("widen_head cannot shrink the class count");
  DetectorModel m = *this;
  m.cfg_.num_classes = new_num_classes;
  if (new_num_classes == cfg_.num_classes) return m;

  const int d = cfg_.hidden;
  const int old_c = cfg_.num_classes, new_c = new_num_classes;
  Rng rng(Rng::derive(seed, "widen-head"));
  nn::Mat w(new_c + 1, d), b(1, new_c + 1);
  for (int j = 0; j < old_c; ++j) {
    std::memcpy(w.row(j), cls_head_.w.value.row(j), sizeof(double) * d);
    b.at(0, j) = cls_head_.b.value.at(0, j);
  }
  for (int j = old_c; j < new_c; ++j) {
    for (int k = 0; k < d; ++k) w.at(j, k) = rng.normal(0.0, 0.01);
    b.at(0, j) = 0.0;
  }
  // Background stays the last column.
  std::memcpy(w.row(new_c), cls_head_.w.value.row(old_c), sizeof(double) * d);
  b.at(0, new_c) = cls_head_.b.value.at(0, old_c);

  m.cls_head_.w.value = std::move(w);
  m.cls_head_.w.grad = nn::Mat(new_c + 1, d);
  m.cls_head_.b.value = std::move(b);
  m.cls_head_.b.grad = nn::Mat(1, new_c + 1);
  return m;
}

uint64_t DetectorModel::param_hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto* self = const_cast<DetectorModel*>(this);
  for (nn::Param* p : self->params()) {
    for (double dvalue : p->value.v) {
      uint64_t bits;
      std::memcpy(&bits, &dvalue, sizeof(bits));
      for (int k = 0; k < 8; ++k) {
        h ^= (bits >> (8 * k)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

void DetectorModel::save(const std::string& path,
                         const std::vector<ClassId>& catalog,
                         const std::vector<int>& head_columns,
                         const std::vector<int>& old_classes,
                         const std::vector<int>& new_classes) const {
  auto* self = const_cast<DetectorModel*>(this);
  json meta;
  meta["format_version"] = 1;
  meta["detector"] = {{"queries", cfg_.num_queries},
                      {"decoder_layers", cfg_.num_decoder_layers},
                      {"encoder_layers", cfg_.num_encoder_layers},
                      {"num_classes", cfg_.num_classes},
                      {"hidden", cfg_.hidden},
                      {"heads", cfg_.heads},
                      {"ffn", cfg_.ffn},
                      {"patch", cfg_.patch},
                      {"canvas", cfg_.canvas},
                      {"background_weight", cfg_.background_weight}};
  json cats = json::array();
  for (const ClassId& c : catalog) cats.push_back({{"id", c.id}, {"name", c.name}});
  meta["catalog"] = cats;
  meta["head_columns"] = head_columns;
  meta["old_classes"] = old_classes;
  meta["new_classes"] = new_classes;

  json tensors = json::array();
  size_t offset = 0;
  for (nn::Param* p : self->params()) {
    tensors.push_back({{"name", p->name},
                       {"rows", p->value.rows},
                       {"cols", p->value.cols},
                       {"offset", offset}});
    offset += p->value.size();
  }
  meta["tensors"] = tensors;
  fs::path bin = fs::path(path);
  bin.replace_extension(".bin");
  meta["weights_file"] = bin.filename().string();

  {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f << meta.dump(1) << "\n";
  }
  std::ofstream f(bin, std::ios::binary);
  if (!f) throw IoError("cannot write weights " + bin.string());
  for (nn::Param* p : self->params())
    f.write(reinterpret_cast<const char*>(p->value.v.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(double)));
}

LoadedDetector DetectorModel::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open checkpoint " + path);
  json meta;
  try {
    meta = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
  if (!meta.contains("format_version") || meta["format_version"] != 1)
    throw ParseError("checkpoint " + path + ": unsupported format_version");

  DetectorConfig cfg;
  const json& dj = meta.at("detector");
  cfg.num_queries = dj.at("queries");
  cfg.num_decoder_layers = dj.at("decoder_layers");
  cfg.num_encoder_layers = dj.at("encoder_layers");
  cfg.num_classes = dj.at("num_classes");
  cfg.hidden = dj.at("hidden");
  cfg.heads = dj.at("heads");
  cfg.ffn = dj.at("ffn");
  cfg.patch = dj.at("patch");
  cfg.canvas = dj.at("canvas");
  cfg.background_weight = dj.at("background_weight");

  LoadedDetector out{DetectorModel::init(cfg, 0), {}, {}, {}, {}};
  for (const json& c : meta.at("catalog"))
    out.catalog.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  for (const json& c : meta.at("head_columns")) out.head_columns.push_back(c.get<int>());
  for (const json& c : meta.at("old_classes")) out.old_classes.push_back(c.get<int>());
  for (const json& c : meta.at("new_classes")) out.new_classes.push_back(c.get<int>());

  fs::path bin = fs::path(path).parent_path() /
                 meta.at("weights_file").get<std::string>();
  std::ifstream wf(bin, std::ios::binary);
  if (!wf) throw IoError("cannot open weights " + bin.string());

  auto params = out.model.params();
  const json& tensors = meta.at("tensors");
  if (tensors.size() != params.size())
    throw ParseError("checkpoint " + path + ": tensor count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    const json& t = tensors[i];
    if (t.at("name") != params[i]->name ||
        t.at("rows") != params[i]->value.rows ||
        t.at("cols") != params[i]->value.cols)
      throw ParseError("checkpoint " + path + ": tensor layout mismatch at " +
                       params[i]->name);
    wf.read(reinterpret_cast<char*>(params[i]->value.v.data()),
            static_cast<std::streamsize>(params[i]->value.size() * sizeof(double)));
    if (!wf) throw ParseError("weights file " + bin.string() + " truncated");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

namespace {

struct LayerLossResult {
  double cls = 0, l1 = 0, giou_term = 0;
};

LayerLossResult layer_loss(const nn::Mat& scores, const nn::Mat& boxes,
                           const AnnotationSet& targets, const MatchWeights& w,
                           double bg_weight, int bg_col, nn::Mat* dlogits,
                           nn::Mat* dboxes, double grad_scale) {
  const int Q = scores.rows;
  MatchResult match = hungarian_match(scores, boxes, targets, w);

  std::vector<int> target_of(Q, -1);
  for (auto& [q, t] : match.pairs) target_of[q] = t;

  LayerLossResult res;
  double weight_sum = 0;
  for (int q = 0; q < Q; ++q) {
    int cls_col = target_of[q] >= 0 ? targets.instances[target_of[q]].class_id : bg_col;
    double wq = target_of[q] >= 0 ? 1.0 : bg_weight;
    weight_sum += wq;
    double p = std::max(scores.at(q, cls_col), 1e-12);
    res.cls += -std::log(p) * wq;
  }
  res.cls /= weight_sum;

  if (dlogits != nullptr) {
    for (int q = 0; q < Q; ++q) {
      int cls_col = target_of[q] >= 0 ? targets.instances[target_of[q]].class_id : bg_col;
      double wq = (target_of[q] >= 0 ? 1.0 : bg_weight) / weight_sum;
      for (int j = 0; j < scores.cols; ++j) {
        double grad = scores.at(q, j) - (j == cls_col ? 1.0 : 0.0);
        dlogits->at(q, j) += grad_scale * wq * grad;
      }
    }
  }

  const int n_pairs = static_cast<int>(match.pairs.size());
  if (n_pairs > 0) {
    for (auto& [q, t] : match.pairs) {
      const Instance& tgt = targets.instances[t];
      double tb[4];
      box_to_cxcywh(tgt.box, tb);
      Box pred = box_from_cxcywh(boxes.row(q));
      double g = giou(pred, tgt.box);
      res.giou_term += 1.0 - g;
      for (int k = 0; k < 4; ++k) res.l1 += std::abs(boxes.at(q, k) - tb[k]);

      if (dboxes != nullptr) {
        // L1 in cxcywh space.
        for (int k = 0; k < 4; ++k) {
          double diff = boxes.at(q, k) - tb[k];
          double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
          dboxes->at(q, k) += grad_scale * w.w_l1 * sign / n_pairs;
        }
        // GIoU in corner space, chained to cxcywh.
        double gg[4];
        giou_grad(pred, tgt.box, gg);
        double scale = -grad_scale * w.w_giou / n_pairs;
        dboxes->at(q, 0) += scale * (gg[0] + gg[2]);
        dboxes->at(q, 1) += scale * (gg[1] + gg[3]);
        dboxes->at(q, 2) += scale * (-gg[0] + gg[2]) * 0.5;
        dboxes->at(q, 3) += scale * (-gg[1] + gg[3]) * 0.5;
      }
    }
    res.l1 /= n_pairs;
    res.giou_term /= n_pairs;
  }
  return res;
}

}  // namespace

LossBreakdown detr_loss(const DetectorOutput& out, const AnnotationSet& targets,
                        const MatchWeights& w, double background_weight) {
  const int L = out.layers;
  LossBreakdown sum;
  for (int l = 0; l < L; ++l) {
    LayerLossResult r =
        layer_loss(out.scores[l], out.boxes[l], targets, w, background_weight,
                   out.num_classes, nullptr, nullptr, 0.0);
    sum.cls += r.cls;
    sum.l1 += r.l1;
    sum.giou += r.giou_term;
  }
  sum.cls /= L;
  sum.l1 /= L;
  sum.giou /= L;
  sum.total = sum.cls + w.w_l1 * sum.l1 + w.w_giou * sum.giou;
  return sum;
}

LossBreakdown detr_loss_with_grads(const DetectorOutput& out,
                                   const AnnotationSet& targets,
                                   const MatchWeights& w,
                                   double background_weight,
                                   std::vector<nn::Mat>& dlogits,
                                   std::vector<nn::Mat>& dboxes) {
  const int L = out.layers;
  dlogits.assign(L, nn::Mat(out.queries, out.num_classes + 1));
  dboxes.assign(L, nn::Mat(out.queries, 4));
  LossBreakdown sum;
  const double grad_scale = 1.0 / L;
  for (int l = 0; l < L; ++l) {
    LayerLossResult r =
        layer_loss(out.scores[l], out.boxes[l], targets, w, background_weight,
                   out.num_classes, &dlogits[l], &dboxes[l], grad_scale);
    sum.cls += r.cls;
    sum.l1 += r.l1;
    sum.giou += r.giou_term;
  }
  sum.cls /= L;
  sum.l1 /= L;
  sum.giou /= L;
  sum.total = sum.cls + w.w_l1 * sum.l1 + w.w_giou * sum.giou;
  return sum;
}

std::optional<std::pair<int, double>> top_non_background(const double* row,
                                                         int columns,
                                                         int background_column,
                                                         double threshold) {
  int argmax = 0;
  for (int j = 1; j < columns; ++j)
    if (row[j] > row[argmax]) argmax = j;
  if (argmax == background_column) return std::nullopt;
  if (row[argmax] < threshold) return std::nullopt;
  return std::make_pair(argmax, row[argmax]);
}

std::vector<Detection> predict(const DetectorOutput& out, double threshold) {
  if (threshold < 0 || threshold > 1)
    throw ConfigError("predict threshold must be in [0,1]");
  const nn::Mat& scores = out.scores.back();
  const nn::Mat& boxes = out.boxes.back();
  std::vector<Detection> dets;
  for (int q = 0; q < scores.rows; ++q) {
    auto top = top_non_background(scores.row(q), scores.cols, out.num_classes,
                                  threshold);
    if (!top) continue;
    dets.push_back({top->first, box_from_cxcywh(boxes.row(q)), top->second});
  }
  return dets;
}

std::vector<Detection> predict(const DetectorModel& model,
                               const ImageRecord& image, double threshold) {
  return predict(model.forward(image), threshold);
}

}  // namespace cidet
