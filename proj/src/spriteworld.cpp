#include "swm/spriteworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "json.hpp"
#include "swm/action_tree.hpp"
#include "swm/modalities.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace swm {
namespace {

constexpr int kSpriteBox = 4;
constexpr int kLidWidth = 3;
constexpr int kAttempts = 64;

const std::vector<std::string>& colors() {
  static const std::vector<std::string> v = {"red", "green", "blue", "yellow"};
  return v;
}
const std::vector<std::string>& shapes() {
  static const std::vector<std::string> v = {"square", "circle", "triangle"};
  return v;
}
const std::vector<std::string>& places() {
  static const std::vector<std::string> v = {"mat", "box", "tray"};
  return v;
}

double hash01(int64_t a, int64_t b, uint64_t salt) {
  uint64_t h = static_cast<uint64_t>(a) * 0x9E3779B97F4A7C15ull ^
               static_cast<uint64_t>(b) * 0xBF58476D1CE4E5B9ull ^ salt * 0x94D049BB133111EBull;
  h ^= h >> 30;
  h *= 0xBF58476D1CE4E5B9ull;
  h ^= h >> 27;
  h *= 0x94D049BB133111EBull;
  h ^= h >> 31;
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

struct Rect {
  int y = 0, x = 0, h = 0, w = 0;
  bool contains_box(int by, int bx, int bh, int bw) const {
    return by >= y && bx >= x && by + bh <= y + h && bx + bw <= x + w;
  }
  bool overlaps(const Rect& o, int gap) const {
    return y < o.y + o.h + gap && o.y < y + h + gap && x < o.x + o.w + gap &&
           o.x < x + w + gap;
  }
  Rect interior() const { return {y + 1, x + 1, h - 2, w - 2}; }
};

std::vector<std::array<int, 2>> line_path(int y0, int x0, int y1, int x1) {
  std::vector<std::array<int, 2>> pts = {{y0, x0}};
  int dy = std::abs(y1 - y0), dx = std::abs(x1 - x0);
  int sy = y0 < y1 ? 1 : -1, sx = x0 < x1 ? 1 : -1;
  int err = dx - dy, y = y0, x = x0;
  while (y != y1 || x != x1) {
    int e2 = 2 * err;
    if (e2 > -dy) {
      err -= dy;
      x += sx;
    }
    if (e2 < dx) {
      err += dx;
      y += sy;
    }
    pts.push_back({y, x});
  }
  return pts;
}

int chebyshev(int y0, int x0, int y1, int x1) {
  return std::max(std::abs(y1 - y0), std::abs(x1 - x0));
}

struct MovingObject {
  std::vector<std::array<int, 2>> offsets;
  std::array<float, 3> color = {0, 0, 0};
  uint64_t shade_salt = 0;
  float depth = 0.0f;
  int channel = 0;
  bool solid = false;
};

struct StaticSprite {
  int y = 0, x = 0;
  std::vector<std::array<int, 2>> offsets;
  std::array<float, 3> color = {0, 0, 0};
  uint64_t shade_salt = 0;
  float depth = 0.0f;
  int channel = 0;
};

struct Layout {
  std::vector<Rect> place_rects;  // mention order
  std::vector<std::string> place_names;
  MovingObject mover;
  std::vector<std::array<int, 2>> path;  // one anchor per frame
  std::vector<StaticSprite> distractors;
};

Rect swept_bbox(const std::vector<std::array<int, 2>>& path, int bh, int bw) {
  int ylo = path[0][0], yhi = path[0][0], xlo = path[0][1], xhi = path[0][1];
  for (const auto& p : path) {
    ylo = std::min(ylo, p[0]);
    yhi = std::max(yhi, p[0]);
    xlo = std::min(xlo, p[1]);
    xhi = std::max(xhi, p[1]);
  }
  return {ylo, xlo, yhi - ylo + bh, xhi - xlo + bw};
}

Rect propose_place(Rng& rng, int H, int hi_w) {
  int h = static_cast<int>(rng.uniform_int(8, 10));
  int w = static_cast<int>(rng.uniform_int(8, hi_w));
  int y = static_cast<int>(rng.uniform_int(1, H - 1 - h));
  int x = static_cast<int>(rng.uniform_int(1, H - 1 - w));
  return {y, x, h, w};
}

std::array<int, 2> propose_in_interior(Rng& rng, const Rect& r) {
  Rect in = r.interior();
  int y = static_cast<int>(rng.uniform_int(in.y, in.y + in.h - kSpriteBox));
  int x = static_cast<int>(rng.uniform_int(in.x, in.x + in.w - kSpriteBox));
  return {y, x};
}

std::string pick_other_color(Rng& rng, const std::string& taken) {
  std::vector<std::string> pool;
  for (const auto& c : colors())
    if (c != taken) pool.push_back(c);
  return pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
}

bool on_canvas(int y, int x, int bh, int bw, int H) {
  return y >= 1 && x >= 1 && y + bh <= H - 1 && x + bw <= H - 1;
}

Layout solve_layout(const TaskTemplate& tpl, int H, int frames, Rng& rng) {
  const int max_travel = frames - 1;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Layout L;
    if (tpl.verbs.empty()) {  // static scene
      Rect p = propose_place(rng, H, 10);
      int y = static_cast<int>(rng.uniform_int(1, H - 1 - kSpriteBox));
      int x = static_cast<int>(rng.uniform_int(1, H - 1 - kSpriteBox));
      if (Rect{y, x, kSpriteBox, kSpriteBox}.overlaps(p, 1)) continue;
      L.place_rects = {p};
      L.place_names = {tpl.places[0]};
      L.mover = {shape_offsets(tpl.shape), color_value(tpl.color),
                 static_cast<uint64_t>(palette_index(tpl.color)), 0.70f,
                 palette_index(tpl.color), false};
      L.path.assign(static_cast<size_t>(frames), {y, x});
      return L;
    }
    if (tpl.verbs[0] == "close") {
      Rect p = propose_place(rng, H, 9);
      if (p.x < kLidWidth + 1) continue;
      Rect in = p.interior();
      int end_x = in.x + in.w - kLidWidth;
      int start_x = p.x - kLidWidth;
      int travel = end_x - start_x;
      if (travel < kLidWidth + 3 || travel > max_travel) continue;
      std::vector<std::array<int, 2>> offs;
      for (int dy = 0; dy < in.h; ++dy)
        for (int dx = 0; dx < kLidWidth; ++dx) offs.push_back({dy, dx});
      auto lid_color = color_value(tpl.places[0]);
      for (auto& c : lid_color) c *= 0.75f;
      L.place_rects = {p};
      L.place_names = {tpl.places[0]};
      L.mover = {offs, lid_color, 0, 0.50f, palette_index(tpl.places[0]), true};
      auto pts = line_path(in.y, start_x, in.y, end_x);
      while (static_cast<int>(pts.size()) < frames) pts.push_back(pts.back());
      L.path = pts;
      auto sweep = swept_bbox(L.path, in.h, kLidWidth);
      std::string dc = colors()[static_cast<size_t>(rng.uniform_int(0, 3))];
      std::string ds = shapes()[static_cast<size_t>(rng.uniform_int(0, 2))];
      int sy = static_cast<int>(rng.uniform_int(1, H - 1 - kSpriteBox));
      int sx = static_cast<int>(rng.uniform_int(1, H - 1 - kSpriteBox));
      Rect sb{sy, sx, kSpriteBox, kSpriteBox};
      if (sb.overlaps(p, 1) || sb.overlaps(sweep, 1)) continue;
      L.distractors.push_back({sy, sx, shape_offsets(ds), color_value(dc),
                               static_cast<uint64_t>(palette_index(dc)), 0.70f,
                               palette_index(dc)});
      return L;
    }

    const bool two_actions = tpl.verbs.size() == 2;
    std::array<int, 2> start{}, end{};
    if (two_actions) {  // pick ... from A ... place ... in/on B
      Rect a = propose_place(rng, H, 10);
      int travel = static_cast<int>(rng.uniform_int(kSpriteBox + 3, max_travel));
      int axis = static_cast<int>(rng.uniform_int(0, 1));
      int sign = rng.uniform_int(0, 1) ? 1 : -1;
      int other = static_cast<int>(rng.uniform_int(-2, 2));
      int bh = static_cast<int>(rng.uniform_int(8, 10));
      int bw = static_cast<int>(rng.uniform_int(8, 10));
      Rect b;
      if (axis == 0) {  // vertical travel; start at the B-facing edge of A
        start = {sign > 0 ? a.y + a.h - 1 - kSpriteBox : a.y + 1,
                 static_cast<int>(rng.uniform_int(a.x + 1, a.x + a.w - 1 - kSpriteBox))};
        end = {start[0] + sign * travel, start[1] + other};
        b = {sign > 0 ? end[0] - 1 : end[0] + kSpriteBox + 1 - bh,
             end[1] - static_cast<int>(rng.uniform_int(1, bw - kSpriteBox - 1)), bh, bw};
      } else {
        start = {static_cast<int>(rng.uniform_int(a.y + 1, a.y + a.h - 1 - kSpriteBox)),
                 sign > 0 ? a.x + a.w - 1 - kSpriteBox : a.x + 1};
        end = {start[0] + other, start[1] + sign * travel};
        b = {end[0] - static_cast<int>(rng.uniform_int(1, bh - kSpriteBox - 1)),
             sign > 0 ? end[1] - 1 : end[1] + kSpriteBox + 1 - bw, bh, bw};
      }
      if (!on_canvas(b.y, b.x, b.h, b.w, H) || a.overlaps(b, 1)) continue;
      L.place_rects = {a, b};
      L.place_names = {tpl.places[0], tpl.places[1]};
    } else {  // push ... toward/on P
      Rect p = propose_place(rng, H, 10);
      int side = static_cast<int>(rng.uniform_int(0, 3));  // 0 left 1 right 2 top 3 bottom
      if (tpl.preps[0] == "on") {
        end = propose_in_interior(rng, p);
      } else {
        Rect in{};
        switch (side) {
          case 0: in = {p.y, p.x - kSpriteBox, p.h - kSpriteBox + 1, 1}; break;
          case 1: in = {p.y, p.x + p.w, p.h - kSpriteBox + 1, 1}; break;
          case 2: in = {p.y - kSpriteBox, p.x, 1, p.w - kSpriteBox + 1}; break;
          default: in = {p.y + p.h, p.x, 1, p.w - kSpriteBox + 1}; break;
        }
        if (in.h < 1 || in.w < 1) continue;
        end = {static_cast<int>(rng.uniform_int(in.y, in.y + in.h - 1)),
               static_cast<int>(rng.uniform_int(in.x, in.x + in.w - 1))};
      }
      int travel = static_cast<int>(rng.uniform_int(kSpriteBox + 3, max_travel));
      int dy = side == 2 ? 1 : side == 3 ? -1 : 0;
      int dx = side == 0 ? 1 : side == 1 ? -1 : 0;
      start = {end[0] - dy * travel, end[1] - dx * travel};
      if (tpl.preps[0] == "toward") {
        Rect sb{start[0], start[1], kSpriteBox, kSpriteBox};
        if (sb.overlaps(p, 0)) continue;
      }
      L.place_rects = {p};
      L.place_names = {tpl.places[0]};
    }
    int travel = chebyshev(start[0], start[1], end[0], end[1]);
    if (travel < kSpriteBox + 3 || travel > max_travel) continue;
    if (!on_canvas(start[0], start[1], kSpriteBox, kSpriteBox, H) ||
        !on_canvas(end[0], end[1], kSpriteBox, kSpriteBox, H))
      continue;
    L.mover = {shape_offsets(tpl.shape), color_value(tpl.color),
               static_cast<uint64_t>(palette_index(tpl.color)), 0.75f,
               palette_index(tpl.color), false};
    auto pts = line_path(start[0], start[1], end[0], end[1]);
    while (static_cast<int>(pts.size()) < frames) pts.push_back(pts.back());
    L.path = pts;

    auto sweep = swept_bbox(L.path, kSpriteBox, kSpriteBox);
    std::string dc = pick_other_color(rng, tpl.color);
    int sy = static_cast<int>(rng.uniform_int(1, H - 1 - kSpriteBox));
    int sx = static_cast<int>(rng.uniform_int(1, H - 1 - kSpriteBox));
    Rect sb{sy, sx, kSpriteBox, kSpriteBox};
    bool clear = !sb.overlaps(sweep, 1);
    for (const auto& r : L.place_rects) clear = clear && !sb.overlaps(r, 1);
    if (!clear) continue;
    L.distractors.push_back({sy, sx, shape_offsets(tpl.shape), color_value(dc),
                             static_cast<uint64_t>(palette_index(dc)), 0.70f,
                             palette_index(dc)});
    return L;
  }
  throw ValueError("template " + tpl.task_id() + ": no valid layout on " + std::to_string(H) +
                   "x" + std::to_string(H) + " canvas with " + std::to_string(frames) +
                   " frames");
}

}  // namespace

std::vector<std::array<int, 2>> shape_offsets(const std::string& shape) {
  std::vector<std::array<int, 2>> out;
  if (shape == "square") {
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) out.push_back({i, j});
  } else if (shape == "circle") {
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        if (!((i == 0 || i == 3) && (j == 0 || j == 3))) out.push_back({i, j});
  } else if (shape == "triangle") {
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j <= i; ++j) out.push_back({i, j});
  } else {
    throw ValueError("unknown shape " + shape);
  }
  return out;
}

int palette_index(const std::string& name) {
  static const std::vector<std::string> order = {"red",  "green", "blue", "yellow",
                                                 "mat",  "box",   "tray"};
  for (size_t i = 0; i < order.size(); ++i)
    if (order[i] == name) return static_cast<int>(i) + 1;
  throw ValueError("unknown palette name " + name);
}

std::array<float, 3> color_value(const std::string& name) {
  return SyntheticExtractor::default_palette()[static_cast<size_t>(palette_index(name))];
}

std::string TaskTemplate::task_id() const {
  std::string acts;
  for (size_t i = 0; i < verbs.size(); ++i) {
    if (i) acts += "+";
    acts += verbs[i];
    if (!preps[i].empty()) acts += "-" + preps[i];
  }
  if (acts.empty()) acts = "static";
  std::string obj = color.empty() ? "none" : color + "-" + shape;
  std::string locs;
  for (size_t i = 0; i < places.size(); ++i) {
    if (i) locs += "-";
    locs += places[i];
  }
  return acts + "." + obj + "." + locs;
}

std::string TaskTemplate::instruction() const {
  if (verbs.empty()) return "";
  std::string s = verbs[0] + " the ";
  s += color.empty() ? places[0] : color + " " + shape;
  if (!preps[0].empty()) s += " " + preps[0] + " the " + places[0];
  if (verbs.size() == 2) s += " and " + verbs[1] + " it " + preps[1] + " the " + places[1];
  return s;
}

TaskTemplate TaskTemplate::static_scene(const std::string& color, const std::string& shape,
                                        const std::string& place) {
  TaskTemplate t;
  t.color = color;
  t.shape = shape;
  t.places = {place};
  return t;
}

std::vector<std::string> grammar_verbs() { return {"pick", "place", "push", "close"}; }
std::vector<std::string> grammar_preps() { return {"from", "in", "on", "toward"}; }

std::vector<TaskTemplate> make_templates() {
  std::vector<TaskTemplate> out;
  auto two = [&](const std::string& p2, const std::string& c, const std::string& s,
                 const std::string& a, const std::string& b) {
    out.push_back({{"pick", "place"}, {"from", p2}, c, s, {a, b}});
  };
  two("in", "red", "square", "mat", "box");
  two("in", "green", "circle", "tray", "box");
  two("in", "blue", "triangle", "box", "mat");
  two("in", "yellow", "square", "tray", "mat");
  two("in", "red", "circle", "box", "tray");
  two("in", "green", "square", "mat", "tray");
  two("in", "blue", "circle", "mat", "box");
  two("on", "yellow", "triangle", "box", "tray");
  two("on", "red", "triangle", "mat", "tray");
  two("on", "green", "triangle", "tray", "mat");
  auto push = [&](const std::string& p, const std::string& c, const std::string& s,
                  const std::string& a) {
    out.push_back({{"push"}, {p}, c, s, {a}});
  };
  push("toward", "red", "square", "box");
  push("toward", "green", "circle", "mat");
  push("toward", "blue", "square", "tray");
  push("toward", "yellow", "circle", "box");
  push("toward", "blue", "triangle", "mat");
  push("toward", "yellow", "square", "tray");
  push("on", "green", "triangle", "box");
  for (const auto& p : places()) out.push_back({{"close"}, {""}, "", "", {p}});
  return out;
}

std::vector<std::string> corpus() {
  std::vector<std::string> out;
  for (const auto& t : make_templates()) out.push_back(t.instruction());
  return out;
}

std::pair<std::vector<TaskTemplate>, std::vector<TaskTemplate>> split_tasks(
    const std::vector<TaskTemplate>& templates, double ratio, uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ValueError("split: ratio must lie in (0,1)");
  const int n = static_cast<int>(templates.size());
  const int k = static_cast<int>(std::llround((1.0 - ratio) * n));
  if (k < 1 || k >= n)
    throw ValueError("split: " + std::to_string(n) + " templates at ratio " +
                     std::to_string(ratio) + " leave no unseen tasks");

  auto atom_set = [](const std::vector<const TaskTemplate*>& ts) {
    std::set<std::string> s;
    for (const auto* t : ts) {
      for (const auto& v : t->verbs) s.insert("v:" + v);
      for (const auto& p : t->preps)
        if (!p.empty()) s.insert("p:" + p);
      if (!t->color.empty()) s.insert("c:" + t->color);
      if (!t->shape.empty()) s.insert("s:" + t->shape);
      for (const auto& p : t->places) s.insert("l:" + p);
    }
    return s;
  };
  auto combo_sets = [](const std::vector<const TaskTemplate*>& ts) {
    std::set<std::string> vo, vp;
    for (const auto* t : ts)
      for (size_t i = 0; i < t->verbs.size(); ++i) {
        if (!t->color.empty()) vo.insert(t->verbs[i] + "|" + t->color + " " + t->shape);
        if (!t->preps[i].empty()) vp.insert(t->verbs[i] + "|" + t->preps[i]);
      }
    return std::make_pair(vo, vp);
  };

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(name_seed(seed, "task-split"));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);

  std::vector<const TaskTemplate*> all;
  for (const auto& t : templates) all.push_back(&t);
  const auto all_atoms = atom_set(all);

  std::vector<int> pick(static_cast<size_t>(k));
  std::function<bool(int, int)> search = [&](int from, int depth) -> bool {
    if (depth == k) {
      std::set<int> chosen(pick.begin(), pick.end());
      std::vector<const TaskTemplate*> seen, unseen;
      for (int i = 0; i < n; ++i)
        (chosen.count(order[static_cast<size_t>(i)]) ? unseen : seen)
            .push_back(&templates[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      if (atom_set(seen) != all_atoms) return false;
      auto [svo, svp] = combo_sets(seen);
      bool any_vo = false, any_vp = false;
      for (const auto* u : unseen) {
        auto [uvo, uvp] = combo_sets({u});
        bool novel = false;
        for (const auto& key : uvo)
          if (!svo.count(key)) novel = any_vo = true;
        for (const auto& key : uvp)
          if (!svp.count(key)) novel = any_vp = true;
        if (!novel) return false;
      }
      return any_vo && any_vp;
    }
    for (int i = from; i < n; ++i) {
      pick[static_cast<size_t>(depth)] = order[static_cast<size_t>(i)];
      if (search(i + 1, depth + 1)) return true;
    }
    return false;
  };
  if (!search(0, 0))
    throw ValueError("split: no compositional split exists for these templates");

  std::set<int> chosen(pick.begin(), pick.end());
  std::vector<TaskTemplate> seen, unseen;
  for (int i = 0; i < n; ++i)
    (chosen.count(i) ? unseen : seen).push_back(templates[static_cast<size_t>(i)]);
  return {seen, unseen};
}

Episode generate_episode(const TaskTemplate& tpl, int image_size, int frames, uint64_t seed) {
  if (image_size < 16) throw ValueError("episode: image_size must be >= 16");
  if (frames < 2) throw ValueError("episode: need at least 2 frames");
  if (!tpl.verbs.empty() && tpl.verbs.size() != tpl.preps.size())
    throw ValueError("episode: verbs and preps must pair up");
  const int H = image_size;
  Rng rng(name_seed(seed, tpl.task_id()));
  Layout L = solve_layout(tpl, H, frames, rng);

  Episode ep;
  ep.instruction = tpl.instruction();
  ep.task_id = tpl.task_id();
  ep.seed = seed;
  ep.path = L.path;
  ep.footprint = L.mover.offsets;
  for (const auto& r : L.place_rects) ep.place_rects.push_back({r.y, r.x, r.h, r.w});

  const auto pal = SyntheticExtractor::default_palette();
  ep.depth_gt = Tensor::zeros({1, H, H});
  ep.semantic_gt = Tensor::zeros({static_cast<int64_t>(pal.size()), H, H});

  for (int f = 0; f < frames; ++f) {
    Tensor frame = Tensor::zeros({3, H, H});
    Tensor depth = Tensor::zeros({1, H, H});
    auto paint = [&](int y, int x, const std::array<float, 3>& c, float d, int ch) {
      if (y < 0 || x < 0 || y >= H || x >= H) return;
      int64_t at = static_cast<int64_t>(y) * H + x;
      if (d <= depth.data[static_cast<size_t>(at)]) return;
      depth.data[static_cast<size_t>(at)] = d;
      for (int64_t cc = 0; cc < 3; ++cc)
        frame.data[static_cast<size_t>(cc * H * H + at)] = c[static_cast<size_t>(cc)];
      if (f == 0) {
        ep.depth_gt.data[static_cast<size_t>(at)] = d;
        for (size_t sc = 0; sc < pal.size(); ++sc)
          ep.semantic_gt.data[sc * static_cast<size_t>(H) * static_cast<size_t>(H) +
                              static_cast<size_t>(at)] = sc == static_cast<size_t>(ch) ? 1.f : 0.f;
      }
    };
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < H; ++j) {
        float u = static_cast<float>(hash01(i, j, seed));
        float g = 0.5f * (1.0f + 0.05f * (u - 0.5f));
        paint(i, j, {g, g, g}, 0.10f, 0);
      }
    for (size_t pi = 0; pi < L.place_rects.size(); ++pi) {
      const Rect& r = L.place_rects[pi];
      auto pc = color_value(L.place_names[pi]);
      int pch = palette_index(L.place_names[pi]);
      Rect in = r.interior();
      for (int i = in.y; i < in.y + in.h; ++i)
        for (int j = in.x; j < in.x + in.w; ++j) paint(i, j, {0.4f, 0.4f, 0.4f}, 0.25f, 0);
      for (int i = r.y; i < r.y + r.h; ++i)
        for (int j = r.x; j < r.x + r.w; ++j)
          if (i == r.y || i == r.y + r.h - 1 || j == r.x || j == r.x + r.w - 1)
            paint(i, j, pc, 0.30f, pch);
    }
    for (const auto& d : L.distractors)
      for (const auto& off : d.offsets) {
        float u = static_cast<float>(hash01(off[0], off[1], d.shade_salt));
        auto c = d.color;
        for (auto& v : c) v *= 1.0f - 0.18f * u;
        paint(d.y + off[0], d.x + off[1], c, d.depth, d.channel);
      }
    const auto& pos = L.path[static_cast<size_t>(f)];
    for (const auto& off : L.mover.offsets) {
      auto c = L.mover.color;
      if (!L.mover.solid) {
        float u = static_cast<float>(hash01(off[0], off[1], L.mover.shade_salt));
        for (auto& v : c) v *= 1.0f - 0.18f * u;
      }
      paint(pos[0] + off[0], pos[1] + off[1], c, L.mover.depth, L.mover.channel);
    }
    ep.frames.push_back(frame);
  }

  bool moved = false;
  for (size_t t = 1; t < L.path.size(); ++t) moved = moved || L.path[t] != L.path[0];
  ep.mask_gt = Tensor::zeros({1, H, H});
  if (moved)
    for (const auto& pos : L.path)
      for (const auto& off : L.mover.offsets) {
        int y = pos[0] + off[0], x = pos[1] + off[1];
        if (y >= 0 && x >= 0 && y < H && x < H)
          ep.mask_gt.data[static_cast<size_t>(y) * static_cast<size_t>(H) +
                          static_cast<size_t>(x)] = 1.0f;
      }

  ep.flow_gt = Tensor::zeros({frames - 1, 2, H, H});
  for (int t = 0; t + 1 < frames; ++t) {
    int dy = L.path[static_cast<size_t>(t) + 1][0] - L.path[static_cast<size_t>(t)][0];
    int dx = L.path[static_cast<size_t>(t) + 1][1] - L.path[static_cast<size_t>(t)][1];
    if (dy == 0 && dx == 0) continue;
    for (const auto& off : L.mover.offsets) {
      int y = L.path[static_cast<size_t>(t)][0] + off[0];
      int x = L.path[static_cast<size_t>(t)][1] + off[1];
      if (y < 0 || x < 0 || y >= H || x >= H) continue;
      size_t base = static_cast<size_t>(t) * 2 * static_cast<size_t>(H) * static_cast<size_t>(H);
      size_t at = static_cast<size_t>(y) * static_cast<size_t>(H) + static_cast<size_t>(x);
      ep.flow_gt.data[base + at] = static_cast<float>(dy);
      ep.flow_gt.data[base + static_cast<size_t>(H) * static_cast<size_t>(H) + at] =
          static_cast<float>(dx);
    }
  }
  return ep;
}

std::string DatasetConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["frames"] = frames;
  j["train_episodes"] = train_episodes;
  j["eval_episodes"] = eval_episodes;
  j["split_ratio"] = split_ratio;
  j["seed"] = seed;
  return j.dump(2);
}

DatasetConfig DatasetConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("dataset config: ") + e.what());
  }
  DatasetConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.frames = j.value("frames", c.frames);
  c.train_episodes = j.value("train_episodes", c.train_episodes);
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  c.split_ratio = j.value("split_ratio", c.split_ratio);
  c.seed = j.value("seed", c.seed);
  return c;
}

void write_episode(const std::string& dir, const Episode& ep, const std::string& split) {
  fs::create_directories(dir);
  for (size_t f = 0; f < ep.frames.size(); ++f)
    save_mdtn(dir + "/" + frame_filename(static_cast<int>(f)), ep.frames[f]);
  save_mdtn(dir + "/depth.mdtn", ep.depth_gt);
  save_mdtn(dir + "/sem.mdtn", ep.semantic_gt);
  save_mdtn(dir + "/mask.mdtn", ep.mask_gt);
  save_mdtn(dir + "/flow.mdtn", ep.flow_gt);
  json j;
  j["instruction"] = ep.instruction;
  j["task_id"] = ep.task_id;
  j["seed"] = ep.seed;
  j["split"] = split;
  j["frames"] = ep.frames.size();
  j["path"] = ep.path;
  j["footprint"] = ep.footprint;
  j["place_rects"] = ep.place_rects;
  write_text(dir + "/meta.json", j.dump(2) + "\n");
}

Episode load_episode(const std::string& dir) {
  json j;
  try {
    j = json::parse(read_text(dir + "/meta.json"));
  } catch (const json::parse_error& e) {
    throw ParseError(dir + "/meta.json: " + e.what());
  }
  Episode ep;
  ep.instruction = j.at("instruction").get<std::string>();
  ep.task_id = j.at("task_id").get<std::string>();
  ep.seed = j.at("seed").get<uint64_t>();
  int frames = j.at("frames").get<int>();
  for (int f = 0; f < frames; ++f)
    ep.frames.push_back(load_mdtn<float>(dir + "/" + frame_filename(f)));
  ep.depth_gt = load_mdtn<float>(dir + "/depth.mdtn");
  ep.semantic_gt = load_mdtn<float>(dir + "/sem.mdtn");
  ep.mask_gt = load_mdtn<float>(dir + "/mask.mdtn");
  ep.flow_gt = load_mdtn<float>(dir + "/flow.mdtn");
  ep.path = j.value("path", ep.path);
  ep.footprint = j.value("footprint", ep.footprint);
  ep.place_rects = j.value("place_rects", ep.place_rects);
  return ep;
}

std::string episode_split(const std::string& dir) {
  json j;
  try {
    j = json::parse(read_text(dir + "/meta.json"));
  } catch (const json::parse_error& e) {
    throw ParseError(dir + "/meta.json: " + e.what());
  }
  return j.value("split", "");
}

void write_dataset(const std::string& root, const DatasetConfig& cfg) {
  if (cfg.train_episodes < 1 || cfg.eval_episodes < 0)
    throw ValueError("dataset: episode counts must be positive");
  auto templates = make_templates();
  auto [seen, unseen] = split_tasks(templates, cfg.split_ratio, cfg.seed);
  auto emit = [&](const std::vector<TaskTemplate>& pool, int count, uint64_t seed_base,
                  const std::string& split) {
    for (int i = 0; i < count; ++i) {
      const auto& tpl = pool[static_cast<size_t>(i) % pool.size()];
      uint64_t ep_seed = seed_base + static_cast<uint64_t>(i);
      Episode ep;
      for (int retry = 0;; ++retry) {
        try {
          ep = generate_episode(tpl, cfg.image_size, cfg.frames, ep_seed);
          break;
        } catch (const ValueError&) {
          if (retry >= 15) throw;
          ep_seed += 1u << 24;
        }
      }
      write_episode(root + "/episodes/" + ep.task_id + "/" + std::to_string(ep_seed), ep,
                    split);
    }
  };
  uint64_t base = cfg.seed * 0x100000ull;
  emit(seen, cfg.train_episodes, base, "train");
  emit(seen, cfg.eval_episodes, base + 0x4000000ull, "eval_seen");
  emit(unseen, cfg.eval_episodes, base + 0x8000000ull, "eval_unseen");
  write_text(root + "/dataset.json", cfg.to_json() + "\n");
}

std::vector<std::string> list_episode_dirs(const std::string& root, const std::string& split) {
  std::vector<std::string> out;
  fs::path base = fs::path(root) / "episodes";
  if (!fs::exists(base)) return out;
  for (const auto& task : fs::directory_iterator(base)) {
    if (!task.is_directory()) continue;
    for (const auto& ep : fs::directory_iterator(task.path())) {
      if (!ep.is_directory() || !fs::exists(ep.path() / "meta.json")) continue;
      if (split.empty() || episode_split(ep.path().string()) == split)
        out.push_back(ep.path().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace swm
