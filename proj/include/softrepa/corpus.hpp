#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "softrepa/rng.hpp"
#include "softrepa/tensor.hpp"

namespace softrepa {

// Fixed-slot caption vocabulary. Slot layout:
//   [count, color1, shape1, pos1, color2, shape2, pos2, EOS]
// with NULL filling unused slots.
enum Token : int {
  TOK_NULL = 0,
  TOK_EOS = 1,
  TOK_CNT1 = 2,
  TOK_CNT2 = 3,
  TOK_RED = 4,
  TOK_GREEN = 5,
  TOK_BLUE = 6,
  TOK_YELLOW = 7,
  TOK_CIRCLE = 8,
  TOK_SQUARE = 9,
  TOK_TRIANGLE = 10,
  TOK_CENTER = 11,
  TOK_LEFT = 12,
  TOK_RIGHT = 13,
  TOK_TOP = 14,
  TOK_BOTTOM = 15,
};

inline constexpr int kVocabSize = 16;
inline constexpr int kCaptionLen = 8;
inline constexpr int kImageSize = 16;
inline constexpr int kChannels = 3;
inline constexpr int kStamp = 5;  // object stamp extent in pixels

enum class Color : int { red, green, blue, yellow };
enum class Shape : int { circle, square, triangle };
enum class Position : int { center, left, right, top, bottom };

struct SceneObject {
  Color color;
  Shape shape;
  Position pos;
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::vector<SceneObject> objects;  // 1 or 2, distinct positions
  int image_size = kImageSize;
  int channels = kChannels;
};

struct Caption {
  std::array<int, kCaptionLen> tokens{};
  auto operator<=>(const Caption&) const = default;
};

Caption null_caption();
bool is_null_caption(const Caption& c);

Caption caption_of(const Scene& s);
// Strict decode; throws contract_error on malformed captions.
Scene scene_of(const Caption& c);

std::string caption_text(const Caption& c);       // "1 red circle center"
Caption parse_caption(const std::string& text);   // inverse of caption_text

Scene sample_scene(RngStream& rng, float two_object_fraction);

// Palette in [-1,1] pixel space; background is mid-gray (0,0,0).
std::array<float, 3> palette_rgb(Color c);

// Anti-aliasing-free filled shapes stamped into position regions; [C,G,G].
Tensor render(const Scene& s);

// Ideal stamp mask for a shape, row-major kStamp x kStamp booleans.
std::array<bool, kStamp * kStamp> shape_mask(Shape s);
// Top-left (row, col) of a position's stamp region for image size g.
std::pair<int, int> region_origin(Position p, int g);

struct VerifierReport {
  bool overall = false;
  std::map<std::string, bool> per_attribute;  // count, color1, shape1, position1, ...
};

// Rule-based ground-truth check of a claimed caption against an image.
// Never throws; non-finite pixels classify as background.
VerifierReport verify(const Tensor& image, const Caption& claimed);

enum class NegativeMode { permute, attribute_flip };

// permute: derangement of the batch (size >= 2). attribute_flip: per caption,
// exactly one attribute slot (color/shape/position of an existing object)
// replaced by a different legal value.
std::vector<Caption> negative_captions(const std::vector<Caption>& batch, NegativeMode mode,
                                       std::uint64_t seed);

struct DatasetPair {
  Tensor image;
  Caption caption;
};

struct Dataset {
  std::uint64_t seed = 0;
  int image_size = kImageSize;
  int caption_len = kCaptionLen;
  int vocab = kVocabSize;
  std::string digest;  // config digest of the producing run; set by the CLI
  std::vector<DatasetPair> pairs;
};

// Deterministic paired corpus; record i depends only on (seed, i).
Dataset generate(int count, std::uint64_t seed, float two_object_fraction);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Seed-stable validation split membership.
bool is_val_index(std::uint64_t seed, std::int64_t index, int val_percent);

// count distinct captions drawn via rejection from the scene sampler.
std::vector<Caption> sample_caption_set(std::uint64_t seed, int count, float two_object_fraction);

}  // namespace softrepa
