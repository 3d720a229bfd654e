#pragma once

#include <memory>
#include <optional>

#include "cidet/data.hpp"
#include "cidet/prompt.hpp"
#include "cidet/rng.hpp"

namespace cidet {

// Controls how faithfully the procedural synthesizer renders a request;
// models a conditioned generator of imperfect fidelity.
struct FidelityProfile {
  double base_quality = 1.0;   // 1 = crisp glyphs, 0 = pure noise
  double jitter_scale = 0.0;   // stddev of box displacement, normalized units
  double drop_prob = 0.0;      // per-object omission probability
  double distractor_rate = 0.0;  // expected count of spurious glyphs

  void validate() const;
};

struct GenerationRequest {
  PromptSpec prompt;
  GroundingInput grounding;
  double grounding_strength = 1.0;  // 1 = boxes respected, 0 = ignored
  double guidance_scale = 7.5;
  std::optional<std::vector<double>> style_vector;
  uint64_t seed = 0;
  int count = 1;

  void validate() const;
};

struct GeneratedSample {
  ImageRecord image;  // provenance = generated; annotation = grounding_used
  GroundingInput grounding_used;
};

// Conditioned image source. Implementations are stateless between calls:
// generate() is a pure function of the request, so replays are
// byte-identical and batches can run concurrently.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::vector<GeneratedSample> generate(const GenerationRequest& req) const = 0;
};

// Glyph palette shared by the renderer and the template-matching test
// oracle. Class id maps to a distinct (shape, color) pair.
enum class GlyphShape { disk, square, triangle, ring, cross, diamond };
GlyphShape glyph_shape(int class_id);
void glyph_color(int class_id, double rgb[3]);

// Draws the class glyph into the box region of an H x W x 3 canvas.
// quality < 1 blends per-pixel noise into the glyph. Pixels outside the
// box are left untouched.
void render_glyph(int class_id, const Box& box, int height, int width,
                  std::vector<double>& canvas, double quality, Rng& noise_rng);

class ProceduralGenerator : public Generator {
 public:
  ProceduralGenerator(int canvas, FidelityProfile fidelity, int style_dim = 8)
      : canvas_(canvas), fidelity_(fidelity), style_dim_(style_dim) {
    fidelity_.validate();
  }

  std::vector<GeneratedSample> generate(const GenerationRequest& req) const override;

  const FidelityProfile& fidelity() const { return fidelity_; }

 private:
  int canvas_;
  FidelityProfile fidelity_;
  int style_dim_;
};

// Directory-exchange generator: writes a request manifest into the
// exchange directory and waits for a response manifest plus pixel
// payload produced by an out-of-process backend.
class ExternalGenerator : public Generator {
 public:
  ExternalGenerator(std::string exchange_dir, double timeout_s)
      : exchange_dir_(std::move(exchange_dir)), timeout_s_(timeout_s) {}

  std::vector<GeneratedSample> generate(const GenerationRequest& req) const override;

 private:
  std::string exchange_dir_;
  double timeout_s_;
};

struct WorldParams {
  int num_images = 200;
  int min_objects = 1;
  int max_objects = 5;
  double min_size = 0.10;
  double max_size = 0.40;
  int canvas = 64;
  int64_t first_image_id = 1;
};

// Procedural ground-truth world: balanced class frequencies, boxes
// snapped to the pixel grid, low mutual overlap, deterministic per seed.
Dataset synthesize_world(const std::vector<ClassId>& catalog,
                         const WorldParams& params, uint64_t seed);

// Non-learned detector used by tests and fidelity checks: recovers
// glyphs by palette color matching and connected components. On
// perfect-fidelity renderings of grid-snapped boxes it returns each
// instance with IoU exactly 1.
namespace oracle {

struct Detection {
  int class_id;
  Box box;
  double score;
};

std::vector<Detection> match_glyphs(const ImageRecord& image,
                                    const std::vector<ClassId>& catalog,
                                    double color_tolerance = 0.12,
                                    int min_pixels = 4);

}  // namespace oracle

}  // namespace cidet
