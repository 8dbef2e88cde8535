// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/episodic_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "taskadapter/errors.hpp"
#include "taskadapter/rng.hpp"

namespace taskadapter {

using nlohmann::json;

// ---- config -------------------------------------------------------------------

void EpisodeConfig::validate() const {
  if (ways < 2) throw ConfigError("ways must be >= 2, got " + std::to_string(ways));
  if (shots < 1) throw ConfigError("shots must be >= 1, got " + std::to_string(shots));
  if (queries_per_class < 1) throw ConfigError("queries per class must be >= 1");
  if (frames < 3) throw ConfigError("frames must be >= 3, got " + std::to_string(frames));
}

RawVideo reverse_frames(const RawVideo& video) {
  RawVideo out(video.frames, video.height, video.width);
  const std::size_t stride = video.frame_stride();
  for (std::size_t f = 0; f < video.frames; ++f) {
    std::copy_n(video.pixels.begin() + static_cast<std::ptrdiff_t>((video.frames - 1 - f) * stride), stride,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(f * stride));
  }
  return out;
}

// ---- synthetic classes -----------------------------------------------------------

const SyntheticClassSpec& Dataset::spec(int class_id) const {
  for (const auto& s : specs) {
    if (s.class_id == class_id) return s;
  }
  throw DataError("dataset has no class " + std::to_string(class_id));
}

std::vector<int> Dataset::class_ids() const {
  std::vector<int> ids;
  for (const auto& [id, list] : videos) ids.push_back(id);
  return ids;
}

std::vector<SyntheticClassSpec> default_class_specs() {
  auto make = [](int id, std::string name, double sx, double sy, double vx, double vy, PatchShape shape,
                 std::array<double, 3> color, double half, std::optional<int> partner = std::nullopt) {
    SyntheticClassSpec spec;
    spec.class_id = id;
    spec.name = std::move(name);
    spec.motion = {sx, sy, vx, vy, shape, color, half};
    spec.reversal_partner = partner;
    return spec;
  };
  return {
      make(0, "Red Square Slides Right", 5.0, 16.0, 1.5, 0.0, PatchShape::square, {0.9, 0.15, 0.1}, 3.5),
      make(1, "Red Square Slides Left", 27.5, 16.0, -1.5, 0.0, PatchShape::square, {0.9, 0.15, 0.1}, 3.5, 0),
      make(2, "Green Bar Drops Down", 16.0, 5.0, 0.0, 1.5, PatchShape::horizontal_bar, {0.15, 0.85, 0.2}, 5.0),
      make(3, "Green Bar Rises Up", 16.0, 27.5, 0.0, -1.5, PatchShape::horizontal_bar, {0.15, 0.85, 0.2}, 5.0, 2),
      make(4, "Blue Cross Moves Diagonally", 5.0, 5.0, 1.45, 1.45, PatchShape::plus, {0.15, 0.3, 0.95}, 4.0),
      make(5, "Yellow Dot Drifts Up Left", 26.0, 26.0, -1.3, -1.3, PatchShape::dot, {0.95, 0.9, 0.15}, 3.5),
      make(6, "Magenta Ring Slides Right", 5.0, 8.0, 1.5, 0.0, PatchShape::hollow_square, {0.85, 0.2, 0.85}, 4.5),
      make(7, "Cyan Pillar Drifts Left", 27.0, 16.0, -1.2, 0.0, PatchShape::vertical_bar, {0.15, 0.85, 0.9}, 5.0),
      make(8, "White Square Sinks", 9.0, 5.0, 0.3, 1.4, PatchShape::square, {0.95, 0.95, 0.95}, 3.0),
      make(9, "Orange Dot Rests", 16.0, 16.0, 0.0, 0.0, PatchShape::dot, {0.95, 0.55, 0.1}, 4.0),
  };
}

namespace {

bool covers(PatchShape shape, double dx, double dy, double half) {
  const double ax = std::abs(dx);
  const double ay = std::abs(dy);
  switch (shape) {
    case PatchShape::square:
      return ax <= half && ay <= half;
    case PatchShape::hollow_square:
      return ax <= half && ay <= half && !(ax <= half - 1.5 && ay <= half - 1.5);
    case PatchShape::plus:
      return (ax <= half && ay <= 1.0) || (ay <= half && ax <= 1.0);
    case PatchShape::horizontal_bar:
      return ax <= half && ay <= std::max(1.0, half / 3.0);
    case PatchShape::vertical_bar:
      return ay <= half && ax <= std::max(1.0, half / 3.0);
    case PatchShape::dot:
      return dx * dx + dy * dy <= half * half;
  }
  return false;
}

RawVideo render_video(const MotionProgram& motion, const VideoGeometry& geo, Rng& rng) {
  RawVideo video(geo.frames, geo.height, geo.width);
  const double background = rng.uniform(0.1, 0.3);
  const double sx = motion.start_x + rng.uniform(-geo.position_jitter, geo.position_jitter);
  const double sy = motion.start_y + rng.uniform(-geo.position_jitter, geo.position_jitter);
  const double speed = 1.0 + rng.uniform(-geo.velocity_jitter, geo.velocity_jitter);
  std::array<double, 3> color{};
  for (std::size_t c = 0; c < 3; ++c) {
    color[c] = std::clamp(motion.color[c] + rng.uniform(-geo.color_jitter, geo.color_jitter), 0.0, 1.0);
  }
  const double half = motion.half_size + rng.uniform(-0.5, 0.5);

  const double dist_x = rng.uniform(2.0, static_cast<double>(geo.width) - 2.0);
  const double dist_y = rng.uniform(2.0, static_cast<double>(geo.height) - 2.0);
  std::array<double, 3> dist_color{rng.uniform(), rng.uniform(), rng.uniform()};

  for (std::size_t f = 0; f < geo.frames; ++f) {
    const double cx = sx + motion.velocity_x * speed * static_cast<double>(f);
    const double cy = sy + motion.velocity_y * speed * static_cast<double>(f);
    for (std::size_t y = 0; y < geo.height; ++y) {
      for (std::size_t x = 0; x < geo.width; ++x) {
        const double px = static_cast<double>(x) + 0.5;
        const double py = static_cast<double>(y) + 0.5;
        std::array<double, 3> value{background, background, background};
        if (geo.distractor && std::abs(px - dist_x) <= 1.5 && std::abs(py - dist_y) <= 1.5) value = dist_color;
        if (covers(motion.shape, px - cx, py - cy, half)) value = color;
        for (std::size_t c = 0; c < 3; ++c) {
          const double noisy = value[c] + (geo.pixel_noise > 0.0 ? rng.normal(0.0, geo.pixel_noise) : 0.0);
          video.at(f, y, x, c) = std::clamp(noisy, 0.0, 1.0);
        }
      }
    }
  }
  return video;
}

// Returns, per class id, the class whose videos it reverses (if any).
std::map<int, int> resolve_reversals(const std::vector<SyntheticClassSpec>& specs) {
  std::map<int, const SyntheticClassSpec*> by_id;
  for (const auto& s : specs) {
    if (!by_id.emplace(s.class_id, &s).second) {
      throw ConfigError("duplicate class_id " + std::to_string(s.class_id));
    }
  }
  std::map<int, int> derived;
  for (const auto& s : specs) {
    if (!s.reversal_partner) continue;
    const int partner = *s.reversal_partner;
    auto it = by_id.find(partner);
    if (it == by_id.end() || partner == s.class_id) {
      throw ConfigError("class " + std::to_string(s.class_id) + " has unknown reversal partner " +
                        std::to_string(partner));
    }
    const auto& other = *it->second;
    // A mutually-declared pair derives the larger id from the smaller.
    if (other.reversal_partner && *other.reversal_partner == s.class_id) {
      if (s.class_id > partner) derived[s.class_id] = partner;
    } else if (other.reversal_partner) {
      throw ConfigError("reversal chains are not supported (class " + std::to_string(s.class_id) + ")");
    } else {
      derived[s.class_id] = partner;
    }
  }
  return derived;
}

}  // namespace

Dataset generate_synthetic_dataset(const std::vector<SyntheticClassSpec>& specs, int videos_per_class,
                                   std::uint64_t seed, const VideoGeometry& geometry) {
  if (specs.empty()) throw ConfigError("no class specs given");
  if (videos_per_class < 1) throw ConfigError("videos_per_class must be >= 1");
  if (geometry.frames < 1 || geometry.height < 1 || geometry.width < 1) {
    throw ConfigError("video geometry must be non-empty");
  }
  const auto derived = resolve_reversals(specs);

  Dataset dataset;
  dataset.specs = specs;
  dataset.seed = seed;
  dataset.geometry = geometry;
  for (const auto& spec : specs) {
    if (derived.count(spec.class_id)) continue;
    auto& list = dataset.videos[spec.class_id];
    for (int j = 0; j < videos_per_class; ++j) {
      Rng rng = Rng::stream(Rng::mix(seed, static_cast<std::uint64_t>(spec.class_id)), static_cast<std::uint64_t>(j));
      list.push_back(render_video(spec.motion, geometry, rng));
    }
  }
  for (const auto& [id, source] : derived) {
    auto& list = dataset.videos[id];
    for (const auto& video : dataset.videos.at(source)) list.push_back(reverse_frames(video));
  }
  return dataset;
}

// ---- persistence ---------------------------------------------------------------

namespace {

constexpr char kVideoMagic[8] = {'T', 'A', 'V', 'D', '0', '0', '0', '1'};

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("truncated video file");
  return v;
}

const char* shape_name(PatchShape shape) {
  switch (shape) {
    case PatchShape::square: return "square";
    case PatchShape::hollow_square: return "hollow_square";
    case PatchShape::plus: return "plus";
    case PatchShape::horizontal_bar: return "horizontal_bar";
    case PatchShape::vertical_bar: return "vertical_bar";
    case PatchShape::dot: return "dot";
  }
  return "square";
}

PatchShape shape_from_name(const std::string& name) {
  for (PatchShape s : {PatchShape::square, PatchShape::hollow_square, PatchShape::plus, PatchShape::horizontal_bar,
                       PatchShape::vertical_bar, PatchShape::dot}) {
    if (name == shape_name(s)) return s;
  }
  throw DataError("unknown patch shape '" + name + "'");
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& directory) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());

  json manifest;
  manifest["format_version"] = 1;
  manifest["seed"] = dataset.seed;
  const auto& g = dataset.geometry;
  manifest["geometry"] = {{"frames", g.frames},
                          {"height", g.height},
                          {"width", g.width},
                          {"pixel_noise", g.pixel_noise},
                          {"position_jitter", g.position_jitter},
                          {"velocity_jitter", g.velocity_jitter},
                          {"color_jitter", g.color_jitter},
                          {"distractor", g.distractor}};
  json classes = json::array();
  for (const auto& spec : dataset.specs) {
    const std::string file = "class_" + std::to_string(spec.class_id) + ".bin";
    const auto& m = spec.motion;
    classes.push_back({{"class_id", spec.class_id},
                       {"name", spec.name},
                       {"reversal_partner", spec.reversal_partner ? json(*spec.reversal_partner) : json(nullptr)},
                       {"motion",
                        {{"start_x", m.start_x},
                         {"start_y", m.start_y},
                         {"velocity_x", m.velocity_x},
                         {"velocity_y", m.velocity_y},
                         {"shape", shape_name(m.shape)},
                         {"color", m.color},
                         {"half_size", m.half_size}}},
                       {"file", file}});

    std::ofstream out(directory / file, std::ios::binary);
    if (!out) throw IoError("cannot write " + (directory / file).string());
    out.write(kVideoMagic, sizeof kVideoMagic);
    const auto& list = dataset.videos.at(spec.class_id);
    write_u64(out, list.size());
    for (const auto& video : list) {
      write_u64(out, video.frames);
      write_u64(out, video.height);
      write_u64(out, video.width);
      out.write(reinterpret_cast<const char*>(video.pixels.data()),
                static_cast<std::streamsize>(video.pixels.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing " + (directory / file).string());
  }
  manifest["classes"] = classes;
  std::ofstream out(directory / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + directory.string());
  out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& directory) {
  std::ifstream in(directory / "manifest.json");
  if (!in) throw DataError("missing dataset manifest in " + directory.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
  Dataset dataset;
  try {
    dataset.seed = manifest.at("seed").get<std::uint64_t>();
    const auto& g = manifest.at("geometry");
    dataset.geometry.frames = g.at("frames").get<std::size_t>();
    dataset.geometry.height = g.at("height").get<std::size_t>();
    dataset.geometry.width = g.at("width").get<std::size_t>();
    dataset.geometry.pixel_noise = g.at("pixel_noise").get<double>();
    dataset.geometry.position_jitter = g.at("position_jitter").get<double>();
    dataset.geometry.velocity_jitter = g.at("velocity_jitter").get<double>();
    dataset.geometry.color_jitter = g.at("color_jitter").get<double>();
    dataset.geometry.distractor = g.at("distractor").get<bool>();
    for (const auto& c : manifest.at("classes")) {
      SyntheticClassSpec spec;
      spec.class_id = c.at("class_id").get<int>();
      spec.name = c.at("name").get<std::string>();
      if (!c.at("reversal_partner").is_null()) spec.reversal_partner = c.at("reversal_partner").get<int>();
      const auto& m = c.at("motion");
      spec.motion.start_x = m.at("start_x").get<double>();
      spec.motion.start_y = m.at("start_y").get<double>();
      spec.motion.velocity_x = m.at("velocity_x").get<double>();
      spec.motion.velocity_y = m.at("velocity_y").get<double>();
      spec.motion.shape = shape_from_name(m.at("shape").get<std::string>());
      spec.motion.color = m.at("color").get<std::array<double, 3>>();
      spec.motion.half_size = m.at("half_size").get<double>();

      const auto file = directory / c.at("file").get<std::string>();
      std::ifstream bin(file, std::ios::binary);
      if (!bin) throw DataError("missing video file " + file.string());
      char magic[8];
      bin.read(magic, sizeof magic);
      if (!bin || std::memcmp(magic, kVideoMagic, sizeof magic) != 0) throw DataError("bad magic in " + file.string());
      const std::uint64_t count = read_u64(bin);
      auto& list = dataset.videos[spec.class_id];
      for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t f = read_u64(bin), h = read_u64(bin), w = read_u64(bin);
        RawVideo video(f, h, w);
        bin.read(reinterpret_cast<char*>(video.pixels.data()),
                 static_cast<std::streamsize>(video.pixels.size() * sizeof(double)));
        if (!bin) throw DataError("truncated video data in " + file.string());
        list.push_back(std::move(video));
      }
      dataset.specs.push_back(std::move(spec));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
  return dataset;
}

// ---- corpus ----------------------------------------------------------------------

Corpus parse_corpus(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("corpus is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw DataError("corpus schema error: top level must be an object");
  Corpus corpus;
  for (const auto& [label, stages] : doc.items()) {
    if (!stages.is_array() || stages.size() != 3) {
      throw DataError("corpus schema error: entry '" + label + "' must list exactly 3 stages");
    }
    std::array<std::string, 3> parsed;
    for (std::size_t i = 0; i < 3; ++i) {
      if (!stages[i].is_string() || stages[i].get<std::string>().empty()) {
        throw DataError("corpus schema error: entry '" + label + "' stage " + std::to_string(i + 1) +
                        " must be a non-empty string");
      }
      parsed[i] = stages[i].get<std::string>();
    }
    corpus.emplace(label, std::move(parsed));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_corpus(buffer.str());
}

std::string corpus_to_json(const Corpus& corpus) {
  json doc = json::object();
  for (const auto& [label, stages] : corpus) doc[label] = stages;
  return doc.dump(2) + "\n";
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus " + path.string());
  out << corpus_to_json(corpus);
}

const Corpus& template_corpus() {
  static const Corpus corpus = {
      {"Long Jump", {"Run up for momentum.", "Take off with a powerful leap.", "Land and maintain balance."}},
      {"Red Square Slides Right",
       {"A red square appears near the left edge.", "The red square slides across the middle.",
        "The red square stops near the right edge."}},
      {"Red Square Slides Left",
       {"A red square appears near the right edge.", "The red square slides across the middle.",
        "The red square stops near the left edge."}},
      {"Green Bar Drops Down",
       {"A green bar appears near the top.", "The green bar drops through the middle.",
        "The green bar rests near the bottom."}},
      {"Green Bar Rises Up",
       {"A green bar appears near the bottom.", "The green bar rises through the middle.",
        "The green bar rests near the top."}},
      {"Blue Cross Moves Diagonally",
       {"A blue cross starts in the top left corner.", "The blue cross moves diagonally through the centre.",
        "The blue cross ends in the bottom right corner."}},
      {"Yellow Dot Drifts Up Left",
       {"A yellow dot starts in the bottom right corner.", "The yellow dot drifts diagonally through the centre.",
        "The yellow dot ends in the top left corner."}},
      {"Magenta Ring Slides Right",
       {"A magenta ring appears high on the left.", "The magenta ring slides along the top.",
        "The magenta ring stops high on the right."}},
      {"Cyan Pillar Drifts Left",
       {"A cyan pillar stands near the right edge.", "The cyan pillar drifts slowly leftwards.",
        "The cyan pillar stops left of the centre."}},
      {"White Square Sinks",
       {"A white square hangs near the top.", "The white square sinks steadily.",
        "The white square settles near the bottom."}},
      {"Orange Dot Rests",
       {"An orange dot sits in the centre.", "The orange dot stays still.", "The orange dot remains in the centre."}},
  };
  return corpus;
}

std::string render_sub_action_instruction(const std::string& label) {
  std::string text(kSubActionInstruction);
  const std::string marker = "{LABEL}";
  text.replace(text.find(marker), marker.size(), label);
  return text;
}

std::array<std::string, 3> TemplateSubActionSource::describe(const std::string& label) {
  const auto& corpus = template_corpus();
  auto it = corpus.find(label);
  if (it == corpus.end()) throw DataError("template corpus has no entry for '" + label + "'");
  return it->second;
}

Corpus build_corpus(const std::vector<std::string>& labels, SubActionSource& source) {
  Corpus corpus;
  for (const auto& label : labels) {
    auto stages = source.describe(label);
    for (const auto& s : stages) {
      if (s.empty()) throw DataError("sub-action source returned an empty stage for '" + label + "'");
    }
    corpus[label] = std::move(stages);
  }
  return corpus;
}

// ---- episodes --------------------------------------------------------------------

std::vector<int> Episode::support_labels() const {
  std::vector<int> labels;
  for (const auto& v : support) labels.push_back(v.label);
  return labels;
}

std::vector<int> Episode::query_labels() const {
  std::vector<int> labels;
  for (const auto& v : query) labels.push_back(v.label);
  return labels;
}

std::vector<std::size_t> uniform_frame_indices(std::size_t frame_count, int target_frames) {
  if (target_frames <= 0) throw ConfigError("target frame count must be positive");
  if (frame_count == 0) throw ContractError("video has no frames");
  std::vector<std::size_t> indices(static_cast<std::size_t>(target_frames));
  const double f = static_cast<double>(frame_count);
  const double t = static_cast<double>(target_frames);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto idx = static_cast<std::size_t>(std::floor((static_cast<double>(j) + 0.5) * f / t));
    indices[j] = std::min(idx, frame_count - 1);
  }
  return indices;
}

RawVideo uniform_sample_frames(const RawVideo& video, int target_frames) {
  const auto indices = uniform_frame_indices(video.frames, target_frames);
  RawVideo out(indices.size(), video.height, video.width);
  const std::size_t stride = video.frame_stride();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    std::copy_n(video.pixels.begin() + static_cast<std::ptrdiff_t>(indices[j] * stride), stride,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(j * stride));
  }
  return out;
}

namespace {

// Partial Fisher-Yates: the first `count` entries become a uniform sample.
template <typename T>
void partial_shuffle(std::vector<T>& items, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count && i + 1 < items.size(); ++i) {
    const std::size_t j = i + rng.below(items.size() - i);
    std::swap(items[i], items[j]);
  }
}

}  // namespace

Episode sample_episode(const Dataset& dataset, const Corpus& corpus, const EpisodeConfig& config,
                       std::uint64_t episode_index) {
  config.validate();
  std::vector<int> pool = config.class_pool.empty() ? dataset.class_ids() : config.class_pool;
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  const auto ways = static_cast<std::size_t>(config.ways);
  if (pool.size() < ways) {
    throw DataError("need " + std::to_string(ways) + " classes, dataset pool has " + std::to_string(pool.size()));
  }
  const auto per_class = static_cast<std::size_t>(config.shots + config.queries_per_class);
  for (int id : pool) {
    auto it = dataset.videos.find(id);
    if (it == dataset.videos.end()) throw DataError("class " + std::to_string(id) + " not in dataset");
    if (it->second.size() < per_class) {
      throw DataError("class " + std::to_string(id) + " has " + std::to_string(it->second.size()) +
                      " videos, episode needs " + std::to_string(per_class));
    }
  }

  Rng rng = Rng::stream(config.seed, episode_index);
  partial_shuffle(pool, ways, rng);
  pool.resize(ways);

  Episode episode;
  for (std::size_t label = 0; label < ways; ++label) {
    const int id = pool[label];
    const auto& spec = dataset.spec(id);
    if (!corpus.count(spec.name)) throw DataError("corpus has no entry for class '" + spec.name + "'");
    episode.class_ids.push_back(id);
    episode.class_names.push_back(spec.name);

    const auto& list = dataset.videos.at(id);
    std::vector<std::size_t> order(list.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    partial_shuffle(order, per_class, rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      LabeledVideo item{uniform_sample_frames(list[order[i]], config.frames), static_cast<int>(label), id, order[i]};
      if (i < static_cast<std::size_t>(config.shots)) {
        episode.support.push_back(std::move(item));
      } else {
        episode.query.push_back(std::move(item));
      }
    }
  }
  return episode;
}

}  // namespace taskadapter
