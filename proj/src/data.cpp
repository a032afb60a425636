#include "omnidit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "omnidit/odt.hpp"
#include "omnidit/rng.hpp"

namespace omnidit::data {

namespace {

using RGB = std::array<double, 3>;

// Primary colors are pairwise distinct, so a distractor with a different
// palette always differs from the target somewhere in the mask.
constexpr RGB kPalette[kPalettes][2] = {
    {{0.75, -0.75, -0.75}, {1.0, 1.0, 1.0}},     {{-0.75, -0.5, 0.75}, {1.0, 0.75, -0.75}},
    {{-0.75, 0.5, -0.5}, {-1.0, -1.0, -1.0}},    {{-1.0, -1.0, 0.25}, {1.0, 0.25, -1.0}},
    {{0.25, -0.75, 0.75}, {-0.75, 0.75, 1.0}},   {{0.0, -0.5, -0.75}, {0.75, 0.5, 0.25}},
    {{1.0, 0.0, 0.5}, {-1.0, 0.25, 0.25}},       {{-0.25, -0.25, -0.25}, {1.0, -1.0, 1.0}},
};
constexpr RGB kBackground[kBackgrounds] = {
    {-0.5, -0.5, -0.25}, {0.25, 0.5, 0.75}, {0.5, 0.25, -0.25}, {-0.25, 0.5, 0.25}};
constexpr RGB kSkin = {0.75, 0.25, 0.0};
constexpr RGB kLegs = {-0.75, -0.75, -0.5};
constexpr RGB kGarmentBackdrop = {0.75, 0.75, 0.75};
// Torso corner per pose at 16 x 16; even so garments align with 2 x 2 patches.
constexpr std::size_t kPose[kPoses][2] = {{4, 4}, {2, 4}, {6, 4}, {4, 6}};

constexpr std::uint64_t kTrainStream = 0x747261696eULL, kEvalStream = 0x6576616cULL;

class Canvas {
 public:
  explicit Canvas(std::size_t s) : s_(s), img_(Shape{3, s, s}) {}
  void fill(const RGB& c) {
    for (std::size_t y = 0; y < s_; ++y)
      for (std::size_t x = 0; x < s_; ++x) set(x, y, c);
  }
  void rect(std::size_t x0, std::size_t y0, std::size_t w, std::size_t h, const RGB& c) {
    for (std::size_t y = y0; y < std::min(y0 + h, s_); ++y)
      for (std::size_t x = x0; x < std::min(x0 + w, s_); ++x) set(x, y, c);
  }
  void set(std::size_t x, std::size_t y, const RGB& c) {
    for (std::size_t ch = 0; ch < 3; ++ch) img_[(ch * s_ + y) * s_ + x] = c[ch];
  }
  Tensor<double>& image() { return img_; }

 private:
  std::size_t s_;
  Tensor<double> img_;
};

// Draws the garment with its top-left corner at (x, y) and marks the mask.
void place_garment(Canvas& c, Tensor<double>* mask, std::size_t s, std::size_t x, std::size_t y,
                   std::size_t scale, std::size_t pattern, std::size_t palette) {
  for (std::size_t v = 0; v < kGarment; ++v)
    for (std::size_t u = 0; u < kGarment; ++u) {
      if (!in_silhouette(u, v)) continue;
      const RGB& col = kPalette[palette][pattern_bit(pattern, u, v)];
      for (std::size_t b = 0; b < scale; ++b)
        for (std::size_t a = 0; a < scale; ++a) {
          const std::size_t px = x + scale * u + a, py = y + scale * v + b;
          c.set(px, py, col);
          if (mask) (*mask)[py * s + px] = 1.0;
        }
    }
}

void check_size(std::size_t image_size) {
  if (image_size == 0 || image_size % 16 != 0)
    throw std::invalid_argument("image size must be a positive multiple of 16, got " + std::to_string(image_size));
}

void check_attrs(const Attributes& a) {
  if (a.pattern >= kPatterns || a.distractor_pattern >= kPatterns || a.palette >= kPalettes ||
      a.distractor_palette >= kPalettes || a.pose >= kPoses || a.background >= kBackgrounds)
    throw std::out_of_range("triplet attribute out of range");
  if (a.palette == a.distractor_palette)
    throw std::invalid_argument("distractor palette must differ from the garment palette");
}

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::model_based: return "model_based";
    case Task::model_free: return "model_free";
    case Task::tryoff: return "tryoff";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "model_based") return Task::model_based;
  if (s == "model_free") return Task::model_free;
  if (s == "tryoff") return Task::tryoff;
  throw std::invalid_argument("unknown task '" + s + "' (expected model_based, model_free or tryoff)");
}

std::size_t arity(Task t) { return t == Task::model_based ? 2 : 1; }

int pattern_bit(std::size_t family, std::size_t u, std::size_t v) {
  switch (family) {
    case 0: return 0;                                         // solid
    case 1: return static_cast<int>((v / 2) % 2);             // horizontal stripes
    case 2: return static_cast<int>((u / 2) % 2);             // vertical stripes
    case 3: return static_cast<int>((u / 2 + v / 2) % 2);     // checker
    case 4: return static_cast<int>(((u + v) / 2) % 2);       // diagonal stripes
    case 5: return (u % 3 == 1 && v % 3 == 1) ? 1 : 0;        // dots
    case 6: return (u == 0 || v == 0 || u == 7 || v == 7) ? 1 : 0;  // frame
    case 7: return v >= 4 ? 1 : 0;                            // two-tone
    default: throw std::out_of_range("pattern family " + std::to_string(family));
  }
}

bool in_silhouette(std::size_t u, std::size_t v) {
  if (u >= kGarment || v >= kGarment) return false;
  return !(v == 0 && (u == 3 || u == 4));  // neckline
}

std::array<double, 3> palette_color(std::size_t palette, int which) {
  if (palette >= kPalettes || which < 0 || which > 1) throw std::out_of_range("palette color");
  return kPalette[palette][which];
}

Tensor<double> garment_patch(std::size_t pattern, std::size_t palette, std::size_t scale) {
  const std::size_t g = kGarment * scale;
  Canvas c(g);
  place_garment(c, nullptr, g, 0, 0, scale, pattern, palette);
  return std::move(c.image());
}

Triplet gen_triplet(std::uint64_t seed, std::size_t image_size) {
  Rng r(seed, 0x74726970ULL);
  Attributes a;
  a.pattern = r.below(kPatterns);
  a.palette = r.below(kPalettes);
  a.pose = r.below(kPoses);
  a.background = r.below(kBackgrounds);
  a.distractor_pattern = r.below(kPatterns);
  a.distractor_palette = (a.palette + 1 + r.below(kPalettes - 1)) % kPalettes;
  return gen_triplet(seed, a, image_size);
}

Triplet gen_triplet(std::uint64_t seed, const Attributes& a, std::size_t image_size) {
  check_size(image_size);
  check_attrs(a);
  const std::size_t s = image_size, k = s / 16;
  Triplet t;
  t.seed = seed;
  t.image_size = s;
  t.attrs = a;
  t.placement = {kPose[a.pose][0] * k, kPose[a.pose][1] * k, k};
  const std::size_t ox = t.placement.x, oy = t.placement.y;

  Canvas g(s);
  g.fill(kGarmentBackdrop);
  t.garment_mask = Tensor<double>(Shape{s, s});
  place_garment(g, &t.garment_mask, s, 4 * k, 4 * k, k, a.pattern, a.palette);
  t.garment = std::move(g.image());

  Canvas body(s);
  body.fill(kBackground[a.background]);
  body.rect(ox + 2 * k, oy - 4 * k, 4 * k, 4 * k, kSkin);              // head
  body.rect(ox, oy, 8 * k, 8 * k, kSkin);                              // torso
  body.rect(ox + 1 * k, oy + 8 * k, 2 * k, s, kLegs);                  // legs
  body.rect(ox + 5 * k, oy + 8 * k, 2 * k, s, kLegs);

  Canvas model = body, tryon = body;
  t.mask = Tensor<double>(Shape{s, s});
  place_garment(model, nullptr, s, ox, oy, k, a.distractor_pattern, a.distractor_palette);
  place_garment(tryon, &t.mask, s, ox, oy, k, a.pattern, a.palette);
  t.model_img = std::move(model.image());
  t.tryon = std::move(tryon.image());
  return t;
}

std::vector<std::uint32_t> text_ids(const Triplet& t, Task task) {
  return {vocab::task + static_cast<std::uint32_t>(task), vocab::pattern + static_cast<std::uint32_t>(t.attrs.pattern),
          vocab::palette + static_cast<std::uint32_t>(t.attrs.palette),
          vocab::pose + static_cast<std::uint32_t>(t.attrs.pose),
          vocab::background + static_cast<std::uint32_t>(t.attrs.background)};
}

TaskInstance make_task(const Triplet& t, Task task) {
  TaskInstance ti;
  ti.task = task;
  ti.text_ids = text_ids(t, task);
  switch (task) {
    case Task::model_based:
      ti.conditions = {t.garment, t.model_img};
      ti.target = t.tryon;
      ti.mask = t.mask;
      break;
    case Task::model_free:
      ti.conditions = {t.garment};
      ti.target = t.tryon;
      ti.mask = t.mask;
      break;
    case Task::tryoff:
      ti.conditions = {t.tryon};
      ti.target = t.garment;
      ti.mask = t.garment_mask;
      break;
    default: throw std::invalid_argument("unknown task");
  }
  return ti;
}

std::uint64_t triplet_seed(std::uint64_t dataset_seed, std::size_t index) {
  return Rng(dataset_seed, kTrainStream).split(index).next_u64();
}

namespace {
Dataset generate_stream(std::uint64_t seed, std::size_t size, std::size_t image_size, std::uint64_t stream,
                        const char* split) {
  check_size(image_size);
  Dataset d;
  d.seed = seed;
  d.split = split;
  d.image_size = image_size;
  d.items.reserve(size);
  const Rng base(seed, stream);
  for (std::size_t i = 0; i < size; ++i) d.items.push_back(gen_triplet(base.split(i).next_u64(), image_size));
  return d;
}
}  // namespace

Dataset generate(std::uint64_t seed, std::size_t size, std::size_t image_size) {
  return generate_stream(seed, size, image_size, kTrainStream, "train");
}

Dataset generate_eval(std::uint64_t seed, std::size_t size, std::size_t image_size) {
  return generate_stream(seed, size, image_size, kEvalStream, "eval");
}

nlohmann::json manifest(const Dataset& d) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& t : d.items) {
    items.push_back({{"seed", t.seed},
                     {"pattern", t.attrs.pattern},
                     {"palette", t.attrs.palette},
                     {"pose", t.attrs.pose},
                     {"background", t.attrs.background},
                     {"distractor_pattern", t.attrs.distractor_pattern},
                     {"distractor_palette", t.attrs.distractor_palette},
                     {"placement", {{"x", t.placement.x}, {"y", t.placement.y}, {"scale", t.placement.scale}}}});
  }
  return {{"format", "omnidit-dataset"}, {"version", 1},          {"seed", d.seed},
          {"split", d.split},            {"size", d.items.size()}, {"image_size", d.image_size},
          {"files", {{"garment", "garment.odt"}, {"model", "model.odt"}, {"tryon", "tryon.odt"}, {"mask", "mask.odt"}}},
          {"items", items}};
}

namespace {
Tensor<double> stack(const Dataset& d, Tensor<double> Triplet::*field) {
  const auto& first = d.items.at(0).*field;
  Shape shape{d.items.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<double> out(shape);
  std::size_t off = 0;
  for (const auto& t : d.items) {
    const auto& src = t.*field;
    std::copy(src.data(), src.data() + src.numel(), out.data() + off);
    off += src.numel();
  }
  return out;
}
}  // namespace

void save(const Dataset& d, const std::filesystem::path& dir, bool ppm) {
  if (d.items.empty()) throw std::invalid_argument("save: empty dataset");
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "manifest.json");
    f << manifest(d).dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  }
  odt::write(dir / "garment.odt", stack(d, &Triplet::garment));
  odt::write(dir / "model.odt", stack(d, &Triplet::model_img));
  odt::write(dir / "tryon.odt", stack(d, &Triplet::tryon));
  odt::write(dir / "mask.odt", stack(d, &Triplet::mask));
  if (ppm) {
    const auto img = dir / "images";
    std::filesystem::create_directories(img);
    for (std::size_t i = 0; i < d.items.size(); ++i) {
      const auto& t = d.items[i];
      const std::string stem = std::to_string(i);
      write_ppm(img / (stem + "_garment.ppm"), t.garment);
      write_ppm(img / (stem + "_model.ppm"), t.model_img);
      write_ppm(img / (stem + "_tryon.ppm"), t.tryon);
      write_pgm(img / (stem + "_mask.pgm"), t.mask);
    }
  }
}

Dataset load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  const auto m = nlohmann::json::parse(f);
  if (m.value("format", "") != "omnidit-dataset") throw std::runtime_error("not a dataset manifest");
  Dataset d;
  d.seed = m.at("seed").get<std::uint64_t>();
  d.split = m.at("split").get<std::string>();
  d.image_size = m.at("image_size").get<std::size_t>();
  for (const auto& it : m.at("items")) {
    Attributes a;
    a.pattern = it.at("pattern");
    a.palette = it.at("palette");
    a.pose = it.at("pose");
    a.background = it.at("background");
    a.distractor_pattern = it.at("distractor_pattern");
    a.distractor_palette = it.at("distractor_palette");
    d.items.push_back(gen_triplet(it.at("seed").get<std::uint64_t>(), a, d.image_size));
  }
  if (d.items.empty()) throw std::runtime_error("dataset manifest lists no items");
  const std::pair<const char*, Tensor<double> Triplet::*> files[] = {
      {"garment.odt", &Triplet::garment}, {"model.odt", &Triplet::model_img},
      {"tryon.odt", &Triplet::tryon}, {"mask.odt", &Triplet::mask}};
  for (const auto& [name, field] : files)
    if (!(odt::read<double>(dir / name) == stack(d, field)))
      throw std::runtime_error(std::string("dataset file ") + name + " does not match its manifest");
  return d;
}

std::vector<Task> PlanConfig::resolved_tasks() const {
  if (!tasks.empty()) return tasks;
  if (stage == 1) return {Task::model_free, Task::tryoff};
  return {Task::model_based, Task::model_free, Task::tryoff};
}

void PlanConfig::validate() const {
  if (batch == 0) throw std::invalid_argument("batch plan: batch must be >= 1");
  if (dataset_size == 0) throw std::invalid_argument("batch plan: empty dataset");
  if (stage != 1 && stage != 2) throw std::invalid_argument("batch plan: stage must be 1 or 2");
  const auto t = resolved_tasks();
  if (stage == 1 && std::find(t.begin(), t.end(), Task::model_based) != t.end())
    throw std::invalid_argument("batch plan: stage 1 trains single-condition tasks only");
  const bool single = std::any_of(t.begin(), t.end(), [](Task x) { return arity(x) == 1; });
  const bool pair = std::any_of(t.begin(), t.end(), [](Task x) { return arity(x) == 2; });
  if (single && pair && (ratio_single == 0 || ratio_pair == 0))
    throw std::invalid_argument("batch plan: both arities present but a ratio is zero");
}

PlannedBatch plan_batch(const PlanConfig& cfg, std::size_t index) {
  const auto tasks = cfg.resolved_tasks();
  std::vector<Task> single, pair;
  for (Task t : tasks) (arity(t) == 1 ? single : pair).push_back(t);

  PlannedBatch b;
  b.stage = cfg.stage;
  b.index = index;
  if (single.empty()) b.arity = 2;
  else if (pair.empty()) b.arity = 1;
  else b.arity = index % (cfg.ratio_single + cfg.ratio_pair) < cfg.ratio_single ? 1 : 2;
  const auto& pool = b.arity == 1 ? single : pair;

  Rng r = Rng(cfg.seed, 0x706c616eULL + static_cast<std::uint64_t>(cfg.stage)).split(index);
  for (std::size_t i = 0; i < cfg.batch; ++i) {
    b.tasks.push_back(pool[pool.size() == 1 ? 0 : r.below(pool.size())]);
    b.items.push_back(r.below(cfg.dataset_size));
  }
  return b;
}

template <typename T>
TaskBatch<T> assemble(const std::vector<TaskInstance>& in) {
  if (in.empty()) throw std::invalid_argument("assemble: empty batch");
  const std::size_t n = in[0].conditions.size();
  const Shape img = in[0].target.shape();
  const std::size_t per = in[0].target.numel(), plane = in[0].mask.numel();
  Shape bshape{in.size()};
  bshape.insert(bshape.end(), img.begin(), img.end());

  TaskBatch<T> b;
  b.conditions.assign(n, Tensor<T>(bshape));
  b.target = Tensor<T>(bshape);
  b.mask = Tensor<T>(bshape);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const auto& x = in[i];
    if (x.conditions.size() != n)
      throw std::invalid_argument("assemble: batch mixes reference counts " + std::to_string(n) + " and " +
                                  std::to_string(x.conditions.size()));
    if (x.target.shape() != img) throw DimensionError("assemble: image shapes differ within a batch");
    b.tasks.push_back(x.task);
    b.text_ids.push_back(x.text_ids);
    for (std::size_t c = 0; c < n; ++c)
      std::transform(x.conditions[c].data(), x.conditions[c].data() + per, b.conditions[c].data() + i * per,
                     [](double v) { return static_cast<T>(v); });
    std::transform(x.target.data(), x.target.data() + per, b.target.data() + i * per,
                   [](double v) { return static_cast<T>(v); });
    for (std::size_t j = 0; j < per; ++j) b.mask[i * per + j] = static_cast<T>(x.mask[j % plane]);
  }
  return b;
}

template <typename T>
TaskBatch<T> assemble(const Dataset& d, const PlannedBatch& pb) {
  std::vector<TaskInstance> in;
  in.reserve(pb.items.size());
  for (std::size_t i = 0; i < pb.items.size(); ++i) in.push_back(make_task(d.items.at(pb.items[i]), pb.tasks[i]));
  return assemble<T>(in);
}

template TaskBatch<float> assemble<float>(const std::vector<TaskInstance>&);
template TaskBatch<double> assemble<double>(const std::vector<TaskInstance>&);
template TaskBatch<float> assemble<float>(const Dataset&, const PlannedBatch&);
template TaskBatch<double> assemble<double>(const Dataset&, const PlannedBatch&);

namespace {
unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }
}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm expects [3, H, W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  f << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) f.put(static_cast<char>(to_byte((image[(c * h + y) * w + x] + 1.0) / 2.0)));
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void write_pgm(const std::filesystem::path& path, const Tensor<double>& image) {
  if (image.rank() != 2) throw DimensionError("write_pgm expects [H, W]");
  const std::size_t h = image.dim(0), w = image.dim(1);
  std::ofstream f(path, std::ios::binary);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) f.put(static_cast<char>(to_byte(image[i])));
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace omnidit::data
