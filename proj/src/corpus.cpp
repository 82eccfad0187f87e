#include "softrepa/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "softrepa/errors.hpp"
#include "softrepa/serde.hpp"

namespace softrepa {

namespace {

constexpr int kColorBase = TOK_RED;
constexpr int kShapeBase = TOK_CIRCLE;
constexpr int kPosBase = TOK_CENTER;

int color_token(Color c) { return kColorBase + static_cast<int>(c); }
int shape_token(Shape s) { return kShapeBase + static_cast<int>(s); }
int pos_token(Position p) { return kPosBase + static_cast<int>(p); }

Color color_of_token(int t) {
  check(t >= kColorBase && t < kColorBase + 4, "not a color token");
  return static_cast<Color>(t - kColorBase);
}
Shape shape_of_token(int t) {
  check(t >= kShapeBase && t < kShapeBase + 3, "not a shape token");
  return static_cast<Shape>(t - kShapeBase);
}
Position pos_of_token(int t) {
  check(t >= kPosBase && t < kPosBase + 5, "not a position token");
  return static_cast<Position>(t - kPosBase);
}

const char* color_name(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  return "?";
}
const char* shape_name(Shape s) {
  switch (s) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
  }
  return "?";
}
const char* pos_name(Position p) {
  switch (p) {
    case Position::center: return "center";
    case Position::left: return "left";
    case Position::right: return "right";
    case Position::top: return "top";
    case Position::bottom: return "bottom";
  }
  return "?";
}

}  // namespace

Caption null_caption() {
  Caption c;
  c.tokens.fill(TOK_NULL);
  return c;
}

bool is_null_caption(const Caption& c) {
  return std::all_of(c.tokens.begin(), c.tokens.end(), [](int t) { return t == TOK_NULL; });
}

Caption caption_of(const Scene& s) {
  check(!s.objects.empty() && s.objects.size() <= 2, "scene needs 1 or 2 objects");
  Caption c = null_caption();
  c.tokens[0] = s.objects.size() == 1 ? TOK_CNT1 : TOK_CNT2;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    c.tokens[1 + 3 * i] = color_token(s.objects[i].color);
    c.tokens[2 + 3 * i] = shape_token(s.objects[i].shape);
    c.tokens[3 + 3 * i] = pos_token(s.objects[i].pos);
  }
  c.tokens[kCaptionLen - 1] = TOK_EOS;
  return c;
}

Scene scene_of(const Caption& c) {
  for (int t : c.tokens) check(t >= 0 && t < kVocabSize, "token id out of vocabulary");
  check(c.tokens[0] == TOK_CNT1 || c.tokens[0] == TOK_CNT2, "caption count slot invalid");
  check(c.tokens[kCaptionLen - 1] == TOK_EOS, "caption missing EOS");
  const int n = c.tokens[0] == TOK_CNT1 ? 1 : 2;
  Scene s;
  for (int i = 0; i < n; ++i) {
    SceneObject o{color_of_token(c.tokens[1 + 3 * i]), shape_of_token(c.tokens[2 + 3 * i]),
                  pos_of_token(c.tokens[3 + 3 * i])};
    s.objects.push_back(o);
  }
  for (int i = n; i < 2; ++i) {
    check(c.tokens[1 + 3 * i] == TOK_NULL && c.tokens[2 + 3 * i] == TOK_NULL &&
              c.tokens[3 + 3 * i] == TOK_NULL,
          "unused caption slots must be NULL");
  }
  if (n == 2)
    check(s.objects[0].pos != s.objects[1].pos, "two objects share a position slot");
  return s;
}

std::string caption_text(const Caption& c) {
  Scene s = scene_of(c);
  std::ostringstream os;
  os << s.objects.size();
  for (const auto& o : s.objects)
    os << ' ' << color_name(o.color) << ' ' << shape_name(o.shape) << ' ' << pos_name(o.pos);
  return os.str();
}

namespace {

Color parse_color(const std::string& w) {
  for (int i = 0; i < 4; ++i)
    if (w == color_name(static_cast<Color>(i))) return static_cast<Color>(i);
  throw contract_error("unknown color word '" + w + "'");
}
Shape parse_shape(const std::string& w) {
  for (int i = 0; i < 3; ++i)
    if (w == shape_name(static_cast<Shape>(i))) return static_cast<Shape>(i);
  throw contract_error("unknown shape word '" + w + "'");
}
Position parse_pos(const std::string& w) {
  for (int i = 0; i < 5; ++i)
    if (w == pos_name(static_cast<Position>(i))) return static_cast<Position>(i);
  throw contract_error("unknown position word '" + w + "'");
}

}  // namespace

Caption parse_caption(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> words;
  std::string w;
  while (is >> w) words.push_back(w);
  check(words.size() == 4 || words.size() == 7,
        "caption text must be '<count> <color> <shape> <position> [...]'");
  const int n = words.size() == 4 ? 1 : 2;
  check(words[0] == std::to_string(n), "caption count word disagrees with object words");
  Scene s;
  for (int i = 0; i < n; ++i) {
    s.objects.push_back({parse_color(words[static_cast<std::size_t>(1 + 3 * i)]),
                         parse_shape(words[static_cast<std::size_t>(2 + 3 * i)]),
                         parse_pos(words[static_cast<std::size_t>(3 + 3 * i)])});
  }
  if (n == 2)
    check(s.objects[0].pos != s.objects[1].pos, "two objects share a position slot");
  return caption_of(s);
}

Scene sample_scene(RngStream& rng, float two_object_fraction) {
  check(two_object_fraction >= 0.0f && two_object_fraction <= 1.0f,
        "two_object_fraction outside [0,1]");
  Scene s;
  const bool two = rng.uniform() < two_object_fraction;
  SceneObject a{static_cast<Color>(rng.uniform_int(4)), static_cast<Shape>(rng.uniform_int(3)),
                static_cast<Position>(rng.uniform_int(5))};
  s.objects.push_back(a);
  if (two) {
    SceneObject b = a;
    b.color = static_cast<Color>(rng.uniform_int(4));
    b.shape = static_cast<Shape>(rng.uniform_int(3));
    do {
      b.pos = static_cast<Position>(rng.uniform_int(5));
    } while (b.pos == a.pos);
    s.objects.push_back(b);
  }
  return s;
}

std::array<float, 3> palette_rgb(Color c) {
  switch (c) {
    case Color::red: return {1.0f, -1.0f, -1.0f};
    case Color::green: return {-1.0f, 1.0f, -1.0f};
    case Color::blue: return {-1.0f, -1.0f, 1.0f};
    case Color::yellow: return {1.0f, 1.0f, -1.0f};
  }
  return {0, 0, 0};
}

std::array<bool, kStamp * kStamp> shape_mask(Shape s) {
  std::array<bool, kStamp * kStamp> m{};
  switch (s) {
    case Shape::square:
      m.fill(true);
      break;
    case Shape::circle:
      for (int r = 0; r < kStamp; ++r)
        for (int c = 0; c < kStamp; ++c)
          m[static_cast<std::size_t>(r * kStamp + c)] =
              (r - 2) * (r - 2) + (c - 2) * (c - 2) <= 6;  // radius 2.5 squared
      break;
    case Shape::triangle:
      // apex at top-center, widening by one half-step every other row
      for (int r = 0; r < kStamp; ++r) {
        const int half = (r + 1) / 2;
        for (int c = 2 - half; c <= 2 + half; ++c)
          m[static_cast<std::size_t>(r * kStamp + c)] = true;
      }
      break;
  }
  return m;
}

std::pair<int, int> region_origin(Position p, int g) {
  check(g >= 3 * kStamp, "image size too small for disjoint position regions");
  const int mid = (g - kStamp) / 2;
  const int far = g - kStamp;
  switch (p) {
    case Position::center: return {mid, mid};
    case Position::left: return {mid, 0};
    case Position::right: return {mid, far};
    case Position::top: return {0, mid};
    case Position::bottom: return {far, mid};
  }
  return {0, 0};
}

Tensor render(const Scene& s) {
  check(!s.objects.empty() && s.objects.size() <= 2, "scene needs 1 or 2 objects");
  if (s.objects.size() == 2)
    check(s.objects[0].pos != s.objects[1].pos, "two objects share a position slot");
  const int g = s.image_size;
  check(s.channels == 3, "render expects 3 channels");
  Tensor img = Tensor::zeros({3, g, g});
  auto px = img.data();
  for (const auto& o : s.objects) {
    const auto [r0, c0] = region_origin(o.pos, g);
    const auto mask = shape_mask(o.shape);
    const auto rgb = palette_rgb(o.color);
    for (int r = 0; r < kStamp; ++r)
      for (int c = 0; c < kStamp; ++c)
        if (mask[static_cast<std::size_t>(r * kStamp + c)])
          for (int ch = 0; ch < 3; ++ch)
            px[static_cast<std::size_t>((ch * g + r0 + r) * g + c0 + c)] = rgb[static_cast<std::size_t>(ch)];
  }
  return img;
}

namespace {

// 0 = background, 1..4 = palette colors
int classify_pixel(float r, float g, float b) {
  if (!std::isfinite(r) || !std::isfinite(g) || !std::isfinite(b)) return 0;
  float best = r * r + g * g + b * b;  // background at origin
  int who = 0;
  for (int c = 0; c < 4; ++c) {
    const auto p = palette_rgb(static_cast<Color>(c));
    const float d = (r - p[0]) * (r - p[0]) + (g - p[1]) * (g - p[1]) + (b - p[2]) * (b - p[2]);
    if (d < best) {
      best = d;
      who = c + 1;
    }
  }
  return who;
}

constexpr int kMinBlobPixels = 6;

struct RegionScan {
  bool detected = false;
  std::array<bool, kStamp * kStamp> blob{};
  int blob_size = 0;
  double mean_rgb[3] = {0, 0, 0};
};

RegionScan scan_region(std::span<const float> px, int g, Position pos) {
  RegionScan out;
  const auto [r0, c0] = region_origin(pos, g);
  for (int r = 0; r < kStamp; ++r) {
    for (int c = 0; c < kStamp; ++c) {
      const int rr = r0 + r, cc = c0 + c;
      const float pr = px[static_cast<std::size_t>((0 * g + rr) * g + cc)];
      const float pg = px[static_cast<std::size_t>((1 * g + rr) * g + cc)];
      const float pb = px[static_cast<std::size_t>((2 * g + rr) * g + cc)];
      if (classify_pixel(pr, pg, pb) != 0) {
        out.blob[static_cast<std::size_t>(r * kStamp + c)] = true;
        ++out.blob_size;
        out.mean_rgb[0] += pr;
        out.mean_rgb[1] += pg;
        out.mean_rgb[2] += pb;
      }
    }
  }
  if (out.blob_size >= kMinBlobPixels) {
    out.detected = true;
    for (double& v : out.mean_rgb) v /= out.blob_size;
  }
  return out;
}

double blob_iou(const std::array<bool, kStamp * kStamp>& blob,
                const std::array<bool, kStamp * kStamp>& mask) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < blob.size(); ++i) {
    inter += blob[i] && mask[i];
    uni += blob[i] || mask[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

VerifierReport verify(const Tensor& image, const Caption& claimed) {
  VerifierReport rep;
  Scene want;
  try {
    want = scene_of(claimed);
  } catch (const std::exception&) {
    rep.overall = false;
    rep.per_attribute["count"] = false;
    return rep;
  }

  const auto& sh = image.shape();
  if (sh.size() != 3 || sh[0] != 3 || sh[1] != sh[2] || sh[1] < 3 * kStamp) {
    rep.overall = false;
    rep.per_attribute["count"] = false;
    return rep;
  }
  const int g = sh[1];
  const auto px = image.data();

  std::array<RegionScan, 5> scans;
  int detected_regions = 0;
  for (int p = 0; p < 5; ++p) {
    scans[static_cast<std::size_t>(p)] = scan_region(px, g, static_cast<Position>(p));
    detected_regions += scans[static_cast<std::size_t>(p)].detected;
  }

  bool all = true;
  const bool count_ok = detected_regions == static_cast<int>(want.objects.size());
  rep.per_attribute["count"] = count_ok;
  all = all && count_ok;

  for (std::size_t i = 0; i < want.objects.size(); ++i) {
    const auto& o = want.objects[i];
    const auto& scan = scans[static_cast<std::size_t>(static_cast<int>(o.pos))];
    const std::string suffix = std::to_string(i + 1);

    const bool pos_ok = scan.detected;
    bool shape_ok = false;
    bool color_ok = false;
    if (scan.detected) {
      // claimed shape must win the ideal-mask IoU comparison and clear 0.5
      double best = -1.0;
      Shape best_shape = Shape::circle;
      double claimed_iou = 0.0;
      for (int s = 0; s < 3; ++s) {
        const double iou = blob_iou(scan.blob, shape_mask(static_cast<Shape>(s)));
        if (iou > best) {
          best = iou;
          best_shape = static_cast<Shape>(s);
        }
        if (static_cast<Shape>(s) == o.shape) claimed_iou = iou;
      }
      shape_ok = best_shape == o.shape && claimed_iou >= 0.5;

      const int nearest = classify_pixel(static_cast<float>(scan.mean_rgb[0]),
                                         static_cast<float>(scan.mean_rgb[1]),
                                         static_cast<float>(scan.mean_rgb[2]));
      color_ok = nearest == static_cast<int>(o.color) + 1;
    }

    rep.per_attribute["position" + suffix] = pos_ok;
    rep.per_attribute["shape" + suffix] = shape_ok;
    rep.per_attribute["color" + suffix] = color_ok;
    all = all && pos_ok && shape_ok && color_ok;
  }

  rep.overall = all;
  return rep;
}

std::vector<Caption> negative_captions(const std::vector<Caption>& batch, NegativeMode mode,
                                       std::uint64_t seed) {
  RngStream rng(seed, "negatives");
  std::vector<Caption> out;
  out.reserve(batch.size());

  if (mode == NegativeMode::permute) {
    check(batch.size() >= 2, "permute negatives need a batch of at least 2");
    const int n = static_cast<int>(batch.size());
    std::vector<int> perm(static_cast<std::size_t>(n));
    // Sattolo's algorithm: a uniformly random cyclic permutation, hence a
    // derangement of the indices.
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = rng.uniform_int(i);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < n; ++i) out.push_back(batch[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    return out;
  }

  for (const auto& cap : batch) {
    Scene s = scene_of(cap);
    const int n_obj = static_cast<int>(s.objects.size());
    // eligible slots: color/shape/position per object
    const int slot = rng.uniform_int(3 * n_obj);
    const int obj = slot / 3;
    auto& o = s.objects[static_cast<std::size_t>(obj)];
    switch (slot % 3) {
      case 0: {
        Color c;
        do {
          c = static_cast<Color>(rng.uniform_int(4));
        } while (c == o.color);
        o.color = c;
        break;
      }
      case 1: {
        Shape sh;
        do {
          sh = static_cast<Shape>(rng.uniform_int(3));
        } while (sh == o.shape);
        o.shape = sh;
        break;
      }
      default: {
        Position p;
        do {
          p = static_cast<Position>(rng.uniform_int(5));
        } while (p == o.pos ||
                 (n_obj == 2 && p == s.objects[static_cast<std::size_t>(1 - obj)].pos));
        o.pos = p;
        break;
      }
    }
    out.push_back(caption_of(s));
  }
  return out;
}

Dataset generate(int count, std::uint64_t seed, float two_object_fraction) {
  check(count >= 1, "generate needs count >= 1");
  Dataset ds;
  ds.seed = seed;
  ds.pairs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    RngStream rng(seed, "scene", static_cast<std::uint64_t>(i));
    Scene s = sample_scene(rng, two_object_fraction);
    ds.pairs.push_back({render(s), caption_of(s)});
  }
  return ds;
}

namespace {
constexpr char kDatasetMagic[4] = {'S', 'R', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.image_size));
  w.u32(static_cast<std::uint32_t>(ds.caption_len));
  w.u32(static_cast<std::uint32_t>(ds.vocab));
  w.u64(static_cast<std::uint64_t>(ds.pairs.size()));
  w.u64(ds.seed);
  w.str(ds.digest);
  for (const auto& p : ds.pairs) {
    for (float v : p.image.data()) w.f32(v);
    for (int t : p.caption.tokens) w.u8(static_cast<std::uint8_t>(t));
  }
  write_file(path, w.buffer());
}

Dataset load_dataset(const std::filesystem::path& path) {
  ByteReader r(read_file(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw format_error("bad dataset magic");
  const auto version = r.u32();
  if (version != kDatasetVersion)
    throw format_error("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.image_size = static_cast<int>(r.u32());
  ds.caption_len = static_cast<int>(r.u32());
  ds.vocab = static_cast<int>(r.u32());
  const auto count = r.u64();
  ds.seed = r.u64();
  ds.digest = r.str();
  if (ds.caption_len != kCaptionLen || ds.vocab != kVocabSize)
    throw format_error("dataset caption geometry mismatch");
  const int g = ds.image_size;
  ds.pairs.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Tensor img = Tensor::uninit({3, g, g});
    for (auto& v : img.data()) v = r.f32();
    Caption c;
    for (auto& t : c.tokens) t = r.u8();
    ds.pairs.push_back({std::move(img), c});
  }
  if (!r.exhausted()) throw format_error("trailing bytes after dataset records");
  return ds;
}

bool is_val_index(std::uint64_t seed, std::int64_t index, int val_percent) {
  check(val_percent >= 0 && val_percent <= 100, "val_percent outside [0,100]");
  const std::uint64_t h = mix64(seed ^ mix64(0x76616cull + static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ull));
  return static_cast<int>(h % 100) < val_percent;
}

std::vector<Caption> sample_caption_set(std::uint64_t seed, int count, float two_object_fraction) {
  check(count >= 1, "sample_caption_set needs count >= 1");
  std::vector<Caption> out;
  std::uint64_t i = 0;
  while (static_cast<int>(out.size()) < count) {
    RngStream rng(seed, "capset", i++);
    Caption c = caption_of(sample_scene(rng, two_object_fraction));
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
    check(i < 1000000ull, "caption set sampler failed to find enough distinct captions");
  }
  return out;
}

}  // namespace softrepa
