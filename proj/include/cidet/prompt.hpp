#pragma once

#include <string>
#include <vector>

#include "cidet/data.hpp"

namespace cidet {

struct PromptSpec {
  std::string positive;
  std::string negative;
};

// Ordered (class, box) pairs conditioning generation. Order follows the
// source annotation.
struct GroundingInput {
  std::vector<Instance> entities;
};

struct GroundingEmbedding {
  size_t entity_count = 0;
  size_t dim = 0;  // label_dim + 8 * fourier frequencies
  std::vector<double> values;  // row-major entity_count x dim

  const double* row(size_t i) const { return values.data() + i * dim; }
};

struct PromptConfig {
  std::string scene_env =
      "demonstrating ultra high detail, 4K, 8K, ultra-realistic, crisp edges, "
      "smooth, hyper-detailed textures";
  std::string negative =
      "blurry, overlapping objects, distorted proportions, monochrome, "
      "grayscale, bad hands, deformed, lowres, error, normal quality, "
      "watermark, duplicate, worst quality, obscured faces, low visibility, "
      "unnatural colors, long body, bad anatomy, missing fingers, extra "
      "digit, fewer digits, cropped";
};

// 1..10 -> spelled-out word, above 10 -> decimal numeral. n >= 1.
std::string number_word(int n);

// Naive pluralizer: "+es" after sibilant endings, small exception table,
// otherwise "+s".
std::string pluralize(const std::string& noun);

// "A photo of two umbrellas, person, and boat, <scene_env>". Groups are
// ordered by descending count, ties by ascending class id; counts >= 2
// use number words and plural names. Requires a non-empty annotation.
PromptSpec build_prompt(const AnnotationSet& a,
                        const std::vector<ClassId>& catalog,
                        const PromptConfig& cfg);

// sin/cos bands of each box coordinate, coordinate-major:
// for p in (x_min, y_min, x_max, y_max), k in [0,F): sin(2^k pi p), cos(2^k pi p).
std::vector<double> fourier_embed(const Box& b, int frequencies);

// Deterministic pseudo-random unit vector per class id; stand-in for a
// text-encoder embedding.
std::vector<double> label_embed(int class_id, int label_dim);

GroundingEmbedding encode_grounding(const GroundingInput& g, int frequencies,
                                    int label_dim);

GroundingInput grounding_from_annotation(const AnnotationSet& a);

}  // namespace cidet
