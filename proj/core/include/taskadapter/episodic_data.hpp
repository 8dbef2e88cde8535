// SPDX-License-Identifier: Apache-2.0
//
// Synthetic moving-patch videos, C-way K-shot episode sampling, uniform
// frame sub-sampling, and the sub-action corpus.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace taskadapter {

struct EpisodeConfig {
  int ways = 5;
  int shots = 1;
  int queries_per_class = 1;
  int frames = 8;
  std::uint64_t seed = 0;
  /// Restricts class sampling to these ids when non-empty.
  std::vector<int> class_pool;

  void validate() const;
};

/// Pixels in [0, 1], layout [frame, row, column, channel].
struct RawVideo {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  RawVideo() = default;
  RawVideo(std::size_t f, std::size_t h, std::size_t w)
      : frames(f), height(h), width(w), pixels(f * h * w * 3, 0.0) {}

  std::size_t frame_stride() const { return height * width * 3; }
  double& at(std::size_t f, std::size_t y, std::size_t x, std::size_t c) {
    return pixels[((f * height + y) * width + x) * 3 + c];
  }
  double at(std::size_t f, std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[((f * height + y) * width + x) * 3 + c];
  }
  bool operator==(const RawVideo&) const = default;
};

/// Same frames in reverse order.
RawVideo reverse_frames(const RawVideo& video);

enum class PatchShape { square, hollow_square, plus, horizontal_bar, vertical_bar, dot };

/// A patch moving with constant velocity. Positions are in pixels at the
/// start of the clip; velocity is pixels per frame.
struct MotionProgram {
  double start_x = 0.0;
  double start_y = 0.0;
  double velocity_x = 0.0;
  double velocity_y = 0.0;
  PatchShape shape = PatchShape::square;
  std::array<double, 3> color{1.0, 1.0, 1.0};
  double half_size = 3.0;
};

struct SyntheticClassSpec {
  int class_id = 0;
  std::string name;
  MotionProgram motion;
  /// When set, this class's videos are the partner's videos played backwards.
  std::optional<int> reversal_partner;
};

struct VideoGeometry {
  std::size_t frames = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  double pixel_noise = 0.05;
  double position_jitter = 3.0;
  double velocity_jitter = 0.15;
  double color_jitter = 0.1;
  bool distractor = true;
};

struct Dataset {
  std::vector<SyntheticClassSpec> specs;
  std::map<int, std::vector<RawVideo>> videos;
  std::uint64_t seed = 0;
  VideoGeometry geometry;

  const SyntheticClassSpec& spec(int class_id) const;
  std::vector<int> class_ids() const;
};

/// Ten classes: two reversal pairs plus six single-direction motions.
std::vector<SyntheticClassSpec> default_class_specs();

Dataset generate_synthetic_dataset(const std::vector<SyntheticClassSpec>& specs, int videos_per_class,
                                   std::uint64_t seed, const VideoGeometry& geometry = {});

void save_dataset(const Dataset& dataset, const std::filesystem::path& directory);
Dataset load_dataset(const std::filesystem::path& directory);

// ---- corpus ------------------------------------------------------------------

/// Class name -> (beginning, process, end) sub-action descriptions.
using Corpus = std::map<std::string, std::array<std::string, 3>>;

Corpus parse_corpus(std::string_view json_text);
Corpus load_corpus(const std::filesystem::path& path);
std::string corpus_to_json(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

/// Descriptions for the default synthetic classes.
const Corpus& template_corpus();

/// Instruction sent to a language model to obtain the three stages.
inline constexpr std::string_view kSubActionInstruction =
    "Given an action label {LABEL}, describe three stages of the action.";
std::string render_sub_action_instruction(const std::string& label);

/// Source of stage descriptions. A language-model client would implement
/// this; the default answers from the bundled template corpus.
class SubActionSource {
 public:
  virtual ~SubActionSource() = default;
  virtual std::array<std::string, 3> describe(const std::string& label) = 0;
};

class TemplateSubActionSource final : public SubActionSource {
 public:
  std::array<std::string, 3> describe(const std::string& label) override;
};

Corpus build_corpus(const std::vector<std::string>& labels, SubActionSource& source);

// ---- episodes ----------------------------------------------------------------

struct LabeledVideo {
  RawVideo video;  // already sub-sampled to EpisodeConfig::frames
  int label = 0;   // in [0, ways)
  int class_id = 0;
  std::size_t source_index = 0;  // index inside the dataset's class list
};

struct Episode {
  std::vector<LabeledVideo> support;  // ordered by label, then shot
  std::vector<LabeledVideo> query;    // ordered by label
  std::vector<std::string> class_names;
  std::vector<int> class_ids;

  std::vector<int> support_labels() const;
  std::vector<int> query_labels() const;
  int ways() const { return static_cast<int>(class_ids.size()); }
};

Episode sample_episode(const Dataset& dataset, const Corpus& corpus, const EpisodeConfig& config,
                       std::uint64_t episode_index);

/// Centre-of-segment indices floor((j + 0.5) * F / T), clamped to [0, F).
std::vector<std::size_t> uniform_frame_indices(std::size_t frame_count, int target_frames);
RawVideo uniform_sample_frames(const RawVideo& video, int target_frames);

}  // namespace taskadapter
