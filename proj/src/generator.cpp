#include "cidet/generator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cidet {

void FidelityProfile::validate() const {
  if (base_quality < 0 || base_quality > 1)
    throw ConfigError("fidelity.base_quality must be in [0,1]");
  if (jitter_scale < 0) throw ConfigError("fidelity.jitter_scale must be >= 0");
  if (drop_prob < 0 || drop_prob > 1)
    throw ConfigError("fidelity.drop_prob must be in [0,1]");
  if (distractor_rate < 0)
    throw ConfigError("fidelity.distractor_rate must be >= 0");
}

void GenerationRequest::validate() const {
  if (grounding.entities.empty())
    throw ConfigError("generation request needs at least one grounding entity");
  if (grounding_strength < 0 || grounding_strength > 1)
    throw ConfigError("grounding_strength must be in [0,1]");
  if (guidance_scale <= 0) throw ConfigError("guidance_scale must be > 0");
  if (count < 1) throw ConfigError("generation count must be >= 1");
  for (const Instance& e : grounding.entities)
    if (!e.box.valid()) throw ConfigError("grounding box invalid");
}

GlyphShape glyph_shape(int class_id) {
  int k = ((class_id % 6) + 6) % 6;
  return static_cast<GlyphShape>(k);
}

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  double r = 0, g = 0, b = 0;
  int i = static_cast<int>(h * 6.0) % 6;
  double f = h * 6.0 - std::floor(h * 6.0);
  double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  rgb[0] = r;
  rgb[1] = g;
  rgb[2] = b;
}

struct PixelRect {
  int r0, r1, c0, c1;  // half-open
  int rows() const { return r1 - r0; }
  int cols() const { return c1 - c0; }
};

PixelRect snap_box(const Box& b, int height, int width) {
  PixelRect p;
  p.c0 = static_cast<int>(std::lround(b.x_min * width));
  p.c1 = static_cast<int>(std::lround(b.x_max * width));
  p.r0 = static_cast<int>(std::lround(b.y_min * height));
  p.r1 = static_cast<int>(std::lround(b.y_max * height));
  p.c0 = std::clamp(p.c0, 0, width - 1);
  p.r0 = std::clamp(p.r0, 0, height - 1);
  p.c1 = std::clamp(p.c1, p.c0 + 1, width);
  p.r1 = std::clamp(p.r1, p.r0 + 1, height);
  return p;
}

bool inside_shape(GlyphShape shape, int r, int c, const PixelRect& p) {
  double h = p.rows(), w = p.cols();
  double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  double dy = r - p.r0 - cy, dx = c - p.c0 - cx;
  double ry = h / 2.0, rx = w / 2.0;
  // Curved shapes use a cell-aware test (shrink |d| by half a pixel) so
  // the extreme rows/columns of the rect are always covered and the
  // glyph's pixel bounding box equals the requested rect exactly.
  double dxa = std::max(0.0, std::abs(dx) - 0.5);
  double dya = std::max(0.0, std::abs(dy) - 0.5);
  double cell_norm = (dxa / rx) * (dxa / rx) + (dya / ry) * (dya / ry);
  switch (shape) {
    case GlyphShape::disk:
      return cell_norm <= 1.0;
    case GlyphShape::square:
      return true;
    case GlyphShape::triangle: {
      double halfwidth = std::max(0.5, (r - p.r0 + 1) / h * rx);
      return std::abs(dx) <= halfwidth;
    }
    case GlyphShape::ring: {
      double center_norm = (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry);
      return cell_norm <= 1.0 && center_norm >= 0.2;
    }
    case GlyphShape::cross: {
      double tx = std::max(0.5, 0.18 * w), ty = std::max(0.5, 0.18 * h);
      return std::abs(dx) <= tx || std::abs(dy) <= ty;
    }
    case GlyphShape::diamond:
      return dxa / rx + dya / ry <= 1.0;
  }
  return false;
}

}  // namespace

void glyph_color(int class_id, double rgb[3]) {
  double hue = std::fmod(0.61803398875 * class_id + 0.15, 1.0);
  if (hue < 0) hue += 1.0;
  hsv_to_rgb(hue, 0.85, 0.95, rgb);
}

void render_glyph(int class_id, const Box& box, int height, int width,
                  std::vector<double>& canvas, double quality, Rng& noise_rng) {
  PixelRect p = snap_box(box, height, width);
  GlyphShape shape = glyph_shape(class_id);
  double rgb[3];
  glyph_color(class_id, rgb);
  for (int r = p.r0; r < p.r1; ++r) {
    for (int c = p.c0; c < p.c1; ++c) {
      if (!inside_shape(shape, r, c, p)) continue;
      size_t base = (static_cast<size_t>(r) * width + c) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        double noise = quality < 1.0 ? noise_rng.uniform() : 0.0;
        canvas[base + ch] = quality * rgb[ch] + (1.0 - quality) * noise;
      }
    }
  }
}

namespace {

void fill_background(std::vector<double>& canvas, int height, int width,
                     uint64_t bg_seed) {
  Rng rng(bg_seed);
  double base = 0.08 + 0.06 * rng.uniform();
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      size_t k = (static_cast<size_t>(r) * width + c) * 3;
      double n = 0.05 * rng.uniform();
      canvas[k] = base + n;
      canvas[k + 1] = base + n;
      canvas[k + 2] = base + n;
    }
}

uint64_t hash_doubles(const std::vector<double>& v) {
  uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (double d : v) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    h = Rng::mix(h ^ bits);
  }
  return h;
}

int poisson_draw(Rng& rng, double rate) {
  if (rate <= 0) return 0;
  double L = std::exp(-rate), p = 1.0;
  int k = 0;
  do {
    ++k;
    p *= rng.uniform();
  } while (p > L);
  return k - 1;
}

std::vector<float> to_float_pixels(const std::vector<double>& canvas) {
  std::vector<float> out(canvas.size());
  for (size_t i = 0; i < canvas.size(); ++i)
    out[i] = static_cast<float>(std::clamp(canvas[i], 0.0, 1.0));
  return out;
}

Box clamp_box(double x0, double y0, double x1, double y1) {
  Box b;
  b.x_min = std::clamp(x0, 0.0, 1.0);
  b.y_min = std::clamp(y0, 0.0, 1.0);
  b.x_max = std::clamp(x1, 0.0, 1.0);
  b.y_max = std::clamp(y1, 0.0, 1.0);
  if (b.x_max - b.x_min < 0.02) {
    if (b.x_min > 0.5) b.x_min = b.x_max - 0.02; else b.x_max = b.x_min + 0.02;
  }
  if (b.y_max - b.y_min < 0.02) {
    if (b.y_min > 0.5) b.y_min = b.y_max - 0.02; else b.y_max = b.y_min + 0.02;
  }
  return b;
}

}  // namespace

std::vector<GeneratedSample> ProceduralGenerator::generate(
    const GenerationRequest& req) const {
  req.validate();
  if (req.style_vector && static_cast<int>(req.style_vector->size()) != style_dim_)
    throw ConfigError("style vector length " +
                      std::to_string(req.style_vector->size()) +
                      " does not match configured style_dim " +
                      std::to_string(style_dim_));

  std::vector<GeneratedSample> out;
  out.reserve(req.count);
  const int H = canvas_, W = canvas_;
  for (int i = 0; i < req.count; ++i) {
    uint64_t sample_seed = Rng::derive(req.seed, static_cast<uint64_t>(i));
    Rng rng(Rng::derive(sample_seed, "layout"));
    Rng noise(Rng::derive(sample_seed, "noise"));

    std::vector<double> canvas(static_cast<size_t>(H) * W * 3, 0.0);
    uint64_t bg_seed = req.style_vector
                           ? hash_doubles(*req.style_vector)
                           : Rng::derive(sample_seed, "background");
    fill_background(canvas, H, W, bg_seed);

    // Spurious glyphs first so requested objects stay on top.
    int distractors = poisson_draw(rng, fidelity_.distractor_rate);
    for (int d = 0; d < distractors; ++d) {
      int cls = static_cast<int>(rng.uniform_int(24));
      double s = rng.uniform(0.06, 0.18);
      double x0 = rng.uniform(0.0, 1.0 - s), y0 = rng.uniform(0.0, 1.0 - s);
      render_glyph(cls, clamp_box(x0, y0, x0 + s, y0 + s), H, W, canvas,
                   fidelity_.base_quality, noise);
    }

    GroundingInput used = req.grounding;
    for (const Instance& e : req.grounding.entities) {
      // Consume the per-object randomness unconditionally so that
      // raising drop_prob never changes the layout of surviving objects.
      double drop_roll = rng.uniform();
      double jx = rng.normal(0.0, fidelity_.jitter_scale);
      double jy = rng.normal(0.0, fidelity_.jitter_scale);
      double rw = rng.uniform(0.08, 0.35), rh = rng.uniform(0.08, 0.35);
      double rx = rng.uniform(0.0, 1.0 - rw), ry2 = rng.uniform(0.0, 1.0 - rh);
      if (drop_roll < fidelity_.drop_prob) continue;

      double beta = req.grounding_strength;
      double w = beta * e.box.width() + (1 - beta) * rw;
      double h = beta * e.box.height() + (1 - beta) * rh;
      double x0 = beta * e.box.x_min + (1 - beta) * rx;
      double y0 = beta * e.box.y_min + (1 - beta) * ry2;
      Box target = clamp_box(x0 + jx, y0 + jy, x0 + w + jx, y0 + h + jy);
      render_glyph(e.class_id, target, H, W, canvas, fidelity_.base_quality,
                   noise);
    }

    GeneratedSample sample;
    sample.grounding_used = used;
    sample.image.image_id =
        static_cast<int64_t>(sample_seed & 0x7fffffffffffffffULL);
    sample.image.height = H;
    sample.image.width = W;
    sample.image.channels = 3;
    sample.image.pixels = to_float_pixels(canvas);
    sample.image.annotation.image_id = sample.image.image_id;
    sample.image.annotation.provenance = Provenance::generated;
    sample.image.annotation.instances = used.entities;
    out.push_back(std::move(sample));
  }
  return out;
}

std::vector<GeneratedSample> ExternalGenerator::generate(
    const GenerationRequest& req) const {
  req.validate();
  if (exchange_dir_.empty())
    throw ConfigError("external generator requires generator.exchange_dir");
  fs::create_directories(exchange_dir_);

  uint64_t id = Rng::derive(req.seed, "exchange");
  char tag[32];
  std::snprintf(tag, sizeof(tag), "%016llx", static_cast<unsigned long long>(id));
  fs::path req_path = fs::path(exchange_dir_) / (std::string("request_") + tag + ".json");
  fs::path resp_path = fs::path(exchange_dir_) / (std::string("response_") + tag + ".json");

  json entities = json::array();
  for (const Instance& e : req.grounding.entities)
    entities.push_back({{"class_id", e.class_id},
                        {"bbox",
                         {e.box.x_min, e.box.y_min, e.box.x_max, e.box.y_max}}});
  json doc{{"id", tag},
           {"count", req.count},
           {"seed", req.seed},
           {"positive", req.prompt.positive},
           {"negative", req.prompt.negative},
           {"grounding_strength", req.grounding_strength},
           {"guidance_scale", req.guidance_scale},
           {"entities", entities}};
  if (req.style_vector) doc["style_vector"] = *req.style_vector;
  {
    std::ofstream f(req_path);
    f << doc.dump(1) << "\n";
  }

  auto deadline = std::chrono::steady_clock::now() +
                  std::chrono::milliseconds(static_cast<int64_t>(timeout_s_ * 1000));
  while (!fs::exists(resp_path)) {
    if (std::chrono::steady_clock::now() > deadline)
      throw IoError("external generator timed out waiting for " +
                    resp_path.string());
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  std::ifstream f(resp_path);
  json resp;
  try {
    resp = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("response manifest " + resp_path.string() + ": " + e.what());
  }
  fs::path pix = fs::path(exchange_dir_) / resp.at("pixel_file").get<std::string>();
  std::vector<ImageRecord> images = load_pixel_payload(pix.string());
  if (static_cast<int>(images.size()) != req.count)
    throw ValidationError("external generator returned " +
                          std::to_string(images.size()) + " images, expected " +
                          std::to_string(req.count));
  std::vector<GeneratedSample> out;
  for (ImageRecord& im : images) {
    GeneratedSample s;
    im.annotation.provenance = Provenance::generated;
    im.annotation.instances = req.grounding.entities;
    s.image = std::move(im);
    s.grounding_used = req.grounding;
    out.push_back(std::move(s));
  }
  return out;
}

Dataset synthesize_world(const std::vector<ClassId>& catalog,
                         const WorldParams& params, uint64_t seed) {
  if (catalog.empty()) throw ConfigError("catalog must be non-empty");
  if (params.num_images < 1) throw ConfigError("num_images must be >= 1");
  if (params.min_objects < 1 || params.max_objects < params.min_objects)
    throw ConfigError("bad objects-per-image range");
  if (params.min_size <= 0 || params.max_size < params.min_size ||
      params.max_size > 1.0)
    throw ConfigError("bad object size range");
  if (params.canvas < 8 || params.min_size * params.canvas < 3.0)
    throw ConfigError("canvas too small for requested object sizes");

  const int H = params.canvas, W = params.canvas;
  Dataset d;
  d.catalog = catalog;

  // Balanced class assignment: a reshuffled deck of class ids keeps
  // per-class instance counts within one deck of each other.
  Rng deck_rng(Rng::derive(seed, "deck"));
  std::vector<int> deck;
  auto draw_class = [&]() {
    if (deck.empty()) {
      for (const ClassId& c : catalog) deck.push_back(c.id);
      for (size_t i = deck.size(); i > 1; --i)
        std::swap(deck[i - 1], deck[deck_rng.uniform_int(i)]);
    }
    int cls = deck.back();
    deck.pop_back();
    return cls;
  };

  for (int img = 0; img < params.num_images; ++img) {
    uint64_t img_seed = Rng::derive(Rng::derive(seed, "image"), img);
    Rng rng(img_seed);
    Rng noise(Rng::derive(img_seed, "noise"));

    ImageRecord rec;
    rec.image_id = params.first_image_id + img;
    rec.height = H;
    rec.width = W;
    rec.channels = 3;
    rec.annotation.image_id = rec.image_id;
    rec.annotation.provenance = Provenance::real;

    std::vector<double> canvas(static_cast<size_t>(H) * W * 3, 0.0);
    fill_background(canvas, H, W, Rng::derive(img_seed, "background"));

    int n_obj = params.min_objects +
                static_cast<int>(rng.uniform_int(
                    static_cast<uint64_t>(params.max_objects - params.min_objects + 1)));
    std::vector<Box> placed;
    for (int k = 0; k < n_obj; ++k) {
      int cls = draw_class();
      double lo = params.min_size, hi = params.max_size;
      Box box;
      bool ok = false;
      for (int attempt = 0; attempt < 80 && !ok; ++attempt) {
        if (attempt > 0 && attempt % 20 == 0) hi = std::max(lo, hi * 0.8);
        // Snap to the pixel grid so glyph extents match boxes exactly.
        int bw = std::max(3, static_cast<int>(std::lround(rng.uniform(lo, hi) * W)));
        int bh = std::max(3, static_cast<int>(std::lround(rng.uniform(lo, hi) * H)));
        bw = std::min(bw, W - 2);
        bh = std::min(bh, H - 2);
        int c0 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(W - bw + 1)));
        int r0 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(H - bh + 1)));
        box = {static_cast<double>(c0) / W, static_cast<double>(r0) / H,
               static_cast<double>(c0 + bw) / W, static_cast<double>(r0 + bh) / H};
        // Keep a 1px margin between glyphs so components never merge.
        Box margin{std::max(0.0, box.x_min - 1.0 / W),
                   std::max(0.0, box.y_min - 1.0 / H),
                   std::min(1.0, box.x_max + 1.0 / W),
                   std::min(1.0, box.y_max + 1.0 / H)};
        ok = true;
        for (const Box& other : placed)
          if (iou(margin, other) > 0.0) {
            ok = false;
            break;
          }
      }
      if (!ok) continue;  // crowded canvas, skip this object
      placed.push_back(box);
      rec.annotation.instances.push_back({cls, box});
      render_glyph(cls, box, H, W, canvas, 1.0, noise);
    }
    rec.pixels = to_float_pixels(canvas);
    d.records.push_back(std::move(rec));
  }
  d.validate();
  return d;
}

namespace oracle {

std::vector<Detection> match_glyphs(const ImageRecord& image,
                                    const std::vector<ClassId>& catalog,
                                    double color_tolerance, int min_pixels) {
  const int H = image.height, W = image.width;
  std::vector<Detection> out;
  std::vector<int> label(static_cast<size_t>(H) * W, -1);

  // Per-pixel nearest palette class within tolerance (L-inf distance).
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      size_t k = (static_cast<size_t>(r) * W + c) * 3;
      double best = color_tolerance;
      int best_cls = -1;
      for (const ClassId& cls : catalog) {
        double rgb[3];
        glyph_color(cls.id, rgb);
        double dist = 0;
        for (int ch = 0; ch < 3; ++ch)
          dist = std::max(dist, std::abs(image.pixels[k + ch] - rgb[ch]));
        if (dist <= best) {
          best = dist;
          best_cls = cls.id;
        }
      }
      label[static_cast<size_t>(r) * W + c] = best_cls;
    }
  }

  // Connected components (4-neighborhood) per class.
  std::vector<bool> visited(static_cast<size_t>(H) * W, false);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      size_t idx = static_cast<size_t>(r) * W + c;
      if (visited[idx] || label[idx] < 0) continue;
      int cls = label[idx];
      int r0 = r, r1 = r, c0 = c, c1 = c, count = 0;
      std::vector<size_t> stack{idx};
      visited[idx] = true;
      while (!stack.empty()) {
        size_t cur = stack.back();
        stack.pop_back();
        int cr = static_cast<int>(cur / W), cc = static_cast<int>(cur % W);
        ++count;
        r0 = std::min(r0, cr);
        r1 = std::max(r1, cr);
        c0 = std::min(c0, cc);
        c1 = std::max(c1, cc);
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        for (int t = 0; t < 4; ++t) {
          int nr = cr + dr[t], nc = cc + dc[t];
          if (nr < 0 || nr >= H || nc < 0 || nc >= W) continue;
          size_t nidx = static_cast<size_t>(nr) * W + nc;
          if (!visited[nidx] && label[nidx] == cls) {
            visited[nidx] = true;
            stack.push_back(nidx);
          }
        }
      }
      if (count < min_pixels) continue;
      Detection det;
      det.class_id = cls;
      det.box = {static_cast<double>(c0) / W, static_cast<double>(r0) / H,
                 static_cast<double>(c1 + 1) / W, static_cast<double>(r1 + 1) / H};
      det.score = 1.0;
      out.push_back(det);
    }
  }
  return out;
}

}  // namespace oracle

}  // namespace cidet
