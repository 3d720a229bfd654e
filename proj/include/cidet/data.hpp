#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cidet/error.hpp"

namespace cidet {

struct ClassId {
  int id = 0;
  std::string name;
};

// Axis-aligned box in normalized [0,1] coordinates, corner form.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool valid() const {
    return 0.0 <= x_min && x_min < x_max && x_max <= 1.0 && 0.0 <= y_min &&
           y_min < y_max && y_max <= 1.0;
  }
};

double iou(const Box& a, const Box& b);

struct Instance {
  int class_id = 0;
  Box box;
};

enum class Provenance { real, generated };

struct AnnotationSet {
  int64_t image_id = 0;
  std::vector<Instance> instances;  // stable order
  Provenance provenance = Provenance::real;
};

struct ImageRecord {
  int64_t image_id = 0;
  int height = 0, width = 0, channels = 3;
  std::vector<float> pixels;  // H*W*C row-major, values in [0,1]
  AnnotationSet annotation;
};

// Ordered partition of the class catalog into phases.
struct TaskSchedule {
  std::vector<std::vector<int>> phases;

  size_t num_phases() const { return phases.size(); }
  // Classes of phases [0, phase_index) merged, i.e. "old" classes when
  // training phase_index.
  std::set<int> classes_before(size_t phase_index) const;
  std::set<int> phase_classes(size_t phase_index) const;
  void validate(const std::vector<ClassId>& catalog) const;
};

struct Dataset {
  std::vector<ImageRecord> records;
  std::vector<ClassId> catalog;

  const ClassId& class_info(int id) const;
  void validate() const;
};

// Dataset file I/O. `path` names the JSON annotation document; pixel
// data lives in the sidecar binary it references (see README for the
// schema). Coordinates are serialized at 6-decimal precision.
Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& d, const std::string& path);

// Rounds to the declared 6-decimal serialization precision.
double quantize_coord(double v);

// Raw pixel payload container (the dataset sidecar format), also used
// by the external-generator exchange protocol.
void save_pixel_payload(const std::vector<ImageRecord>& images,
                        const std::string& path);
std::vector<ImageRecord> load_pixel_payload(const std::string& path);

// Keeps every image with at least one instance of a phase class and
// filters its annotation down to those instances. Images may appear in
// several phases' splits.
Dataset split_by_schedule(const Dataset& d, const TaskSchedule& s,
                          size_t phase_index);

// Same filter for an arbitrary class set (used to collect the old-task
// annotations across several phases).
Dataset split_by_classes(const Dataset& d, const std::set<int>& classes);

std::map<int, int64_t> class_instance_counts(const Dataset& d);

TaskSchedule load_schedule(const std::string& path);
void save_schedule(const TaskSchedule& s, const std::string& path);

// "8+4" shorthand over the catalog order.
TaskSchedule schedule_from_sizes(const std::vector<int>& sizes,
                                 const std::vector<ClassId>& catalog);
TaskSchedule parse_schedule_spec(const std::string& spec,
                                 const std::vector<ClassId>& catalog);

}  // namespace cidet
