#include "cidet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cidet {

double iou(const Box& a, const Box& b) {
  double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double quantize_coord(double v) { return std::round(v * 1e6) / 1e6; }

std::set<int> TaskSchedule::classes_before(size_t phase_index) const {
  std::set<int> out;
  for (size_t m = 0; m < phase_index && m < phases.size(); ++m)
    out.insert(phases[m].begin(), phases[m].end());
  return out;
}

std::set<int> TaskSchedule::phase_classes(size_t phase_index) const {
  if (phase_index >= phases.size())
    throw ConfigError("phase index out of range");
  return {phases[phase_index].begin(), phases[phase_index].end()};
}

void TaskSchedule::validate(const std::vector<ClassId>& catalog) const {
  if (phases.empty()) throw ValidationError("schedule has no phases");
  std::set<int> seen;
  size_t total = 0;
  for (size_t m = 0; m < phases.size(); ++m) {
    if (phases[m].empty())
      throw ValidationError("schedule phase " + std::to_string(m) + " is empty");
    for (int c : phases[m]) {
      if (!seen.insert(c).second)
        throw ValidationError("class " + std::to_string(c) +
                              " appears in more than one phase");
    }
    total += phases[m].size();
  }
  if (total != catalog.size())
    throw ValidationError("schedule covers " + std::to_string(total) +
                          " classes, catalog has " +
                          std::to_string(catalog.size()));
  for (const ClassId& c : catalog) {
    if (!seen.count(c.id))
      throw ValidationError("catalog class " + std::to_string(c.id) +
                            " missing from schedule");
  }
}

const ClassId& Dataset::class_info(int id) const {
  for (const ClassId& c : catalog)
    if (c.id == id) return c;
  throw ValidationError("class id " + std::to_string(id) + " not in catalog");
}

void Dataset::validate() const {
  std::set<int> ids;
  for (size_t i = 0; i < catalog.size(); ++i) {
    const ClassId& c = catalog[i];
    if (c.name.empty())
      throw ValidationError("category " + std::to_string(c.id) +
                            " has an empty name");
    if (c.id < 0 || static_cast<size_t>(c.id) >= catalog.size() ||
        !ids.insert(c.id).second)
      throw ValidationError("category ids must be unique and dense in [0, " +
                            std::to_string(catalog.size()) + ")");
  }
  std::set<int64_t> image_ids;
  for (const ImageRecord& r : records) {
    if (!image_ids.insert(r.image_id).second)
      throw ValidationError("duplicate image id " + std::to_string(r.image_id));
    if (r.annotation.image_id != r.image_id)
      throw ValidationError("annotation image id mismatch for image " +
                            std::to_string(r.image_id));
    for (size_t k = 0; k < r.annotation.instances.size(); ++k) {
      const Instance& inst = r.annotation.instances[k];
      if (!ids.count(inst.class_id))
        throw ValidationError("image " + std::to_string(r.image_id) +
                              " instance " + std::to_string(k) +
                              ": class " + std::to_string(inst.class_id) +
                              " not in catalog");
      if (!inst.box.valid())
        throw ValidationError("image " + std::to_string(r.image_id) +
                              " instance " + std::to_string(k) +
                              ": invalid box");
    }
  }
}

namespace {

json box_to_json(const Box& b) {
  return json::array({quantize_coord(b.x_min), quantize_coord(b.y_min),
                      quantize_coord(b.x_max), quantize_coord(b.y_max)});
}

}  // namespace

namespace {
constexpr char kPixMagic[8] = {'C', 'I', 'D', 'E', 'T', 'P', 'X', '1'};
}

void save_pixel_payload(const std::vector<ImageRecord>& images,
                        const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write pixel file " + path);
  f.write(kPixMagic, sizeof(kPixMagic));
  uint64_t count = images.size();
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const ImageRecord& r : images) {
    int64_t id = r.image_id;
    int32_t dims[3] = {r.height, r.width, r.channels};
    f.write(reinterpret_cast<const char*>(&id), sizeof(id));
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    f.write(reinterpret_cast<const char*>(r.pixels.data()),
            static_cast<std::streamsize>(r.pixels.size() * sizeof(float)));
  }
  if (!f) throw IoError("short write to pixel file " + path);
}

std::vector<ImageRecord> load_pixel_payload(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read pixel file " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kPixMagic, sizeof(magic)) != 0)
    throw ParseError("bad magic in pixel file " + path);
  uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::vector<ImageRecord> images;
  images.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    ImageRecord r;
    int64_t id = 0;
    int32_t dims[3];
    f.read(reinterpret_cast<char*>(&id), sizeof(id));
    f.read(reinterpret_cast<char*>(dims), sizeof(dims));
    if (!f) throw ParseError("pixel file " + path + " truncated");
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw ParseError("pixel file " + path + ": bad image dimensions");
    r.image_id = id;
    r.annotation.image_id = id;
    r.height = dims[0];
    r.width = dims[1];
    r.channels = dims[2];
    r.pixels.resize(static_cast<size_t>(dims[0]) * dims[1] * dims[2]);
    f.read(reinterpret_cast<char*>(r.pixels.data()),
           static_cast<std::streamsize>(r.pixels.size() * sizeof(float)));
    if (!f) throw ParseError("pixel file " + path + " truncated");
    images.push_back(std::move(r));
  }
  return images;
}

void save_dataset(const Dataset& d, const std::string& path) {
  d.validate();
  json doc;
  doc["format_version"] = 1;
  json cats = json::array();
  for (const ClassId& c : d.catalog)
    cats.push_back({{"id", c.id}, {"name", c.name}});
  doc["categories"] = cats;

  json images = json::array();
  json anns = json::array();
  bool any_pixels = false;
  for (const ImageRecord& r : d.records) {
    images.push_back(
        {{"id", r.image_id},
         {"height", r.height},
         {"width", r.width},
         {"provenance",
          r.annotation.provenance == Provenance::generated ? "generated" : "real"}});
    if (!r.pixels.empty()) any_pixels = true;
    for (const Instance& inst : r.annotation.instances) {
      anns.push_back({{"image_id", r.image_id},
                      {"category_id", inst.class_id},
                      {"bbox", box_to_json(inst.box)}});
    }
  }
  doc["images"] = images;
  doc["annotations"] = anns;

  fs::path p(path);
  if (any_pixels) {
    fs::path pix = p;
    pix.replace_extension(".pix");
    doc["pixel_file"] = pix.filename().string();
    save_pixel_payload(d.records, pix.string());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write dataset file " + path);
  f << doc.dump(1) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open dataset file " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("dataset file " + path + ": " + e.what());
  }
  if (!doc.contains("format_version") || doc["format_version"] != 1)
    throw ParseError("dataset file " + path + ": missing or unsupported format_version");

  Dataset d;
  try {
    for (const json& c : doc.at("categories")) {
      d.catalog.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
    }
    std::map<int64_t, size_t> index;
    for (const json& im : doc.at("images")) {
      ImageRecord r;
      r.image_id = im.at("id").get<int64_t>();
      r.height = im.at("height").get<int>();
      r.width = im.at("width").get<int>();
      r.annotation.image_id = r.image_id;
      if (im.contains("provenance") && im["provenance"] == "generated")
        r.annotation.provenance = Provenance::generated;
      index[r.image_id] = d.records.size();
      d.records.push_back(std::move(r));
    }
    size_t n = 0;
    for (const json& a : doc.at("annotations")) {
      int64_t image_id = a.at("image_id").get<int64_t>();
      auto it = index.find(image_id);
      if (it == index.end())
        throw ParseError("annotation " + std::to_string(n) +
                         ": unknown image_id " + std::to_string(image_id));
      const json& bb = a.at("bbox");
      if (!bb.is_array() || bb.size() != 4)
        throw ParseError("annotation " + std::to_string(n) +
                         ": bbox must be 4 floats");
      Instance inst;
      inst.class_id = a.at("category_id").get<int>();
      inst.box = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                  bb[3].get<double>()};
      if (!inst.box.valid())
        throw ValidationError("annotation " + std::to_string(n) + " (image " +
                              std::to_string(image_id) +
                              "): box outside [0,1] or degenerate");
      d.records[it->second].annotation.instances.push_back(inst);
      ++n;
    }
  } catch (const json::exception& e) {
    throw ParseError("dataset file " + path + ": " + e.what());
  }

  if (doc.contains("pixel_file")) {
    fs::path pix = fs::path(path).parent_path() / doc["pixel_file"].get<std::string>();
    std::vector<ImageRecord> payload = load_pixel_payload(pix.string());
    if (payload.size() != d.records.size())
      throw ParseError("pixel file " + pix.string() + " holds " +
                       std::to_string(payload.size()) +
                       " images, annotation file lists " +
                       std::to_string(d.records.size()));
    for (size_t i = 0; i < payload.size(); ++i) {
      ImageRecord& r = d.records[i];
      if (payload[i].image_id != r.image_id)
        throw ParseError("pixel file " + pix.string() +
                         ": image order mismatch at id " +
                         std::to_string(r.image_id));
      if (payload[i].height != r.height || payload[i].width != r.width ||
          payload[i].channels != r.channels)
        throw ParseError("pixel file " + pix.string() +
                         ": size mismatch for image " +
                         std::to_string(r.image_id));
      r.pixels = std::move(payload[i].pixels);
    }
  }
  d.validate();
  return d;
}

Dataset split_by_schedule(const Dataset& d, const TaskSchedule& s,
                          size_t phase_index) {
  if (phase_index >= s.num_phases())
    throw ConfigError("phase index " + std::to_string(phase_index) +
                      " out of range for " + std::to_string(s.num_phases()) +
                      "-phase schedule");
  return split_by_classes(d, s.phase_classes(phase_index));
}

Dataset split_by_classes(const Dataset& d, const std::set<int>& classes) {
  Dataset out;
  out.catalog = d.catalog;
  for (const ImageRecord& r : d.records) {
    std::vector<Instance> kept;
    for (const Instance& inst : r.annotation.instances)
      if (classes.count(inst.class_id)) kept.push_back(inst);
    if (kept.empty()) continue;
    ImageRecord nr = r;
    nr.annotation.instances = std::move(kept);
    out.records.push_back(std::move(nr));
  }
  return out;
}

std::map<int, int64_t> class_instance_counts(const Dataset& d) {
  std::map<int, int64_t> counts;
  for (const ClassId& c : d.catalog) counts[c.id] = 0;
  for (const ImageRecord& r : d.records)
    for (const Instance& inst : r.annotation.instances) counts[inst.class_id]++;
  return counts;
}

TaskSchedule load_schedule(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open schedule file " + path);
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("schedule file " + path + ": " + e.what());
  }
  TaskSchedule s;
  if (!doc.is_array()) throw ParseError("schedule file must be a list of lists");
  for (const json& phase : doc) {
    if (!phase.is_array()) throw ParseError("schedule phases must be lists");
    std::vector<int> ids;
    for (const json& v : phase) ids.push_back(v.get<int>());
    s.phases.push_back(std::move(ids));
  }
  return s;
}

void save_schedule(const TaskSchedule& s, const std::string& path) {
  json doc = json::array();
  for (const auto& phase : s.phases) doc.push_back(phase);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write schedule file " + path);
  f << doc.dump() << "\n";
}

TaskSchedule schedule_from_sizes(const std::vector<int>& sizes,
                                 const std::vector<ClassId>& catalog) {
  TaskSchedule s;
  size_t pos = 0;
  for (int n : sizes) {
    if (n <= 0) throw ConfigError("schedule phase sizes must be positive");
    std::vector<int> ids;
    for (int k = 0; k < n; ++k) {
      if (pos >= catalog.size())
        throw ConfigError("schedule sizes exceed catalog size");
      ids.push_back(catalog[pos++].id);
    }
    s.phases.push_back(std::move(ids));
  }
  if (pos != catalog.size())
    throw ConfigError("schedule sizes must cover the whole catalog");
  s.validate(catalog);
  return s;
}

TaskSchedule parse_schedule_spec(const std::string& spec,
                                 const std::vector<ClassId>& catalog) {
  std::vector<int> sizes;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, '+')) {
    if (tok.empty()) throw ConfigError("bad schedule spec: " + spec);
    sizes.push_back(std::stoi(tok));
  }
  if (sizes.empty()) throw ConfigError("bad schedule spec: " + spec);
  return schedule_from_sizes(sizes, catalog);
}

}  // namespace cidet
