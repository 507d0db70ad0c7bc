#include "swm/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "swm/action_tree.hpp"

using json = nlohmann::json;

namespace swm {
namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void check_video_pair(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape.size() != 4)
    throw ShapeError(std::string(who) + ": videos must be [F,C,H,W]");
  if (a.shape != b.shape)
    throw ShapeError(std::string(who) + ": video shapes differ");
}

std::vector<double> luma(const Tensor& video, int64_t f) {
  const int64_t C = video.shape[1], H = video.shape[2], W = video.shape[3];
  const double w[3] = {0.299, 0.587, 0.114};
  std::vector<double> out(static_cast<size_t>(H * W), 0.0);
  const int64_t plane = H * W;
  const float* base = video.data.data() + f * C * plane;
  if (C == 1) {
    for (int64_t i = 0; i < plane; ++i) out[static_cast<size_t>(i)] = base[i];
    return out;
  }
  if (C != 3) throw ShapeError("ssim: videos must have 1 or 3 channels");
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i)
      out[static_cast<size_t>(i)] += w[c] * base[c * plane + i];
  return out;
}

std::vector<double> gaussian_kernel() {
  std::vector<double> k(kWindow);
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    double d = i - (kWindow - 1) / 2.0;
    k[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable valid-mode Gaussian filter of an H x W plane.
std::vector<double> gauss_valid(const std::vector<double>& img, int64_t H, int64_t W) {
  static const std::vector<double> k = gaussian_kernel();
  const int64_t Wv = W - kWindow + 1, Hv = H - kWindow + 1;
  std::vector<double> rows(static_cast<size_t>(H * Wv), 0.0);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < Wv; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i)
        s += k[static_cast<size_t>(i)] * img[static_cast<size_t>(y * W + x + i)];
      rows[static_cast<size_t>(y * Wv + x)] = s;
    }
  std::vector<double> out(static_cast<size_t>(Hv * Wv), 0.0);
  for (int64_t y = 0; y < Hv; ++y)
    for (int64_t x = 0; x < Wv; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i)
        s += k[static_cast<size_t>(i)] * rows[static_cast<size_t>((y + i) * Wv + x)];
      out[static_cast<size_t>(y * Wv + x)] = s;
    }
  return out;
}

}  // namespace

Tensor stack_frames(const std::vector<Tensor>& frames, size_t from, int64_t count) {
  if (count < 0) count = static_cast<int64_t>(frames.size()) - static_cast<int64_t>(from);
  if (count <= 0 || from + static_cast<size_t>(count) > frames.size())
    throw ValueError("stack_frames: range out of bounds");
  const auto& sh = frames[from].shape;
  if (sh.size() != 3) throw ShapeError("stack_frames: frames must be [C,H,W]");
  Tensor out = Tensor::zeros({count, sh[0], sh[1], sh[2]});
  const size_t plane = frames[from].data.size();
  for (int64_t f = 0; f < count; ++f) {
    const auto& fr = frames[from + static_cast<size_t>(f)];
    if (fr.shape != sh) throw ShapeError("stack_frames: frame shapes differ");
    std::copy(fr.data.begin(), fr.data.end(),
              out.data.begin() + static_cast<int64_t>(plane) * f);
  }
  return out;
}

Tensor clamp01(const Tensor& video) {
  Tensor out = video;
  for (auto& v : out.data) v = std::min(1.0f, std::max(0.0f, v));
  return out;
}

MetricSeries psnr(const Tensor& generated, const Tensor& reference) {
  check_video_pair(generated, reference, "psnr");
  const int64_t F = generated.shape[0];
  const int64_t per = generated.shape[1] * generated.shape[2] * generated.shape[3];
  MetricSeries out;
  for (int64_t f = 0; f < F; ++f) {
    double mse = 0.0;
    for (int64_t i = 0; i < per; ++i) {
      double d = static_cast<double>(generated.data[static_cast<size_t>(f * per + i)]) -
                 static_cast<double>(reference.data[static_cast<size_t>(f * per + i)]);
      mse += d * d;
    }
    mse /= static_cast<double>(per);
    double db = mse == 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
    out.values.push_back(db);
    out.mean += db / static_cast<double>(F);
  }
  return out;
}

MetricSeries ssim(const Tensor& generated, const Tensor& reference) {
  check_video_pair(generated, reference, "ssim");
  const int64_t F = generated.shape[0], H = generated.shape[2], W = generated.shape[3];
  if (H < kWindow || W < kWindow)
    throw ValueError("ssim: frame smaller than the 11x11 window");
  MetricSeries out;
  for (int64_t f = 0; f < F; ++f) {
    auto x = luma(generated, f), y = luma(reference, f);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    auto mx = gauss_valid(x, H, W), my = gauss_valid(y, H, W);
    auto mxx = gauss_valid(xx, H, W), myy = gauss_valid(yy, H, W), mxy = gauss_valid(xy, H, W);
    double acc = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
      double vx = mxx[i] - mx[i] * mx[i];
      double vy = myy[i] - my[i] * my[i];
      double cxy = mxy[i] - mx[i] * my[i];
      acc += (2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2) /
             ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
    }
    double s = acc / static_cast<double>(mx.size());
    out.values.push_back(s);
    out.mean += s / static_cast<double>(F);
  }
  return out;
}

Tensor block_flow(const Tensor& prev, const Tensor& next, int block, int radius) {
  if (prev.shape.size() != 3 || prev.shape != next.shape)
    throw ShapeError("block_flow: frames must be matching [C,H,W]");
  if (block < 1 || radius < 0) throw ValueError("block_flow: bad block or radius");
  const int64_t C = prev.shape[0], H = prev.shape[1], W = prev.shape[2];
  const int64_t Hb = H / block, Wb = W / block;
  if (Hb < 1 || Wb < 1) throw ValueError("block_flow: frame smaller than one block");
  Tensor out = Tensor::zeros({2, Hb, Wb});
  for (int64_t by = 0; by < Hb; ++by)
    for (int64_t bx = 0; bx < Wb; ++bx) {
      const int64_t y0 = by * block, x0 = bx * block;
      double best = 0.0;
      int bdy = 0, bdx = 0;
      bool first = true;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          if (y0 + dy < 0 || x0 + dx < 0 || y0 + dy + block > H || x0 + dx + block > W)
            continue;
          double ssd = 0.0;
          for (int64_t c = 0; c < C; ++c)
            for (int i = 0; i < block; ++i)
              for (int j = 0; j < block; ++j) {
                double d =
                    static_cast<double>(
                        prev.data[static_cast<size_t>((c * H + y0 + i) * W + x0 + j)]) -
                    static_cast<double>(
                        next.data[static_cast<size_t>((c * H + y0 + dy + i) * W + x0 + dx + j)]);
                ssd += d * d;
              }
          int n2 = dy * dy + dx * dx, b2 = bdy * bdy + bdx * bdx;
          bool better = first || ssd < best ||
                        (ssd == best &&
                         (n2 < b2 || (n2 == b2 && std::make_pair(dy, dx) <
                                                      std::make_pair(bdy, bdx))));
          if (better) {
            best = ssd;
            bdy = dy;
            bdx = dx;
            first = false;
          }
        }
      out.at({0, by, bx}) = static_cast<float>(bdy);
      out.at({1, by, bx}) = static_cast<float>(bdx);
    }
  return out;
}

MetricSeries flow_error(const Tensor& generated, const Tensor& reference, int block,
                        int radius) {
  check_video_pair(generated, reference, "flow_error");
  const int64_t F = generated.shape[0];
  if (F < 2) throw ValueError("flow_error: need at least 2 frames");
  const int64_t C = generated.shape[1], H = generated.shape[2], W = generated.shape[3];
  auto frame = [&](const Tensor& v, int64_t f) {
    Tensor t = Tensor::zeros({C, H, W});
    const size_t plane = static_cast<size_t>(C * H * W);
    std::copy(v.data.begin() + static_cast<int64_t>(plane) * f,
              v.data.begin() + static_cast<int64_t>(plane) * (f + 1), t.data.begin());
    return t;
  };
  MetricSeries out;
  for (int64_t f = 0; f + 1 < F; ++f) {
    Tensor fg = block_flow(frame(generated, f), frame(generated, f + 1), block, radius);
    Tensor fr = block_flow(frame(reference, f), frame(reference, f + 1), block, radius);
    const int64_t nb = fg.shape[1] * fg.shape[2];
    double epe = 0.0;
    for (int64_t i = 0; i < nb; ++i) {
      double dy = fg.data[static_cast<size_t>(i)] - fr.data[static_cast<size_t>(i)];
      double dx = fg.data[static_cast<size_t>(nb + i)] - fr.data[static_cast<size_t>(nb + i)];
      epe += std::sqrt(dy * dy + dx * dx);
    }
    epe /= static_cast<double>(nb);
    out.values.push_back(epe);
    out.mean += epe / static_cast<double>(F - 1);
  }
  return out;
}

void MetricsReport::finalize() {
  auto mean_of = [](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  psnr_mean = mean_of(psnr_per_episode);
  ssim_mean = mean_of(ssim_per_episode);
  flow_mean = mean_of(flow_per_episode);
}

std::string MetricsReport::to_json() const {
  json j;
  j["variant"] = variant;
  j["split"] = split;
  j["config_fingerprint"] = config_fingerprint;
  j["n_episodes"] = psnr_per_episode.size();
  j["psnr"] = {{"per_episode", psnr_per_episode}, {"mean", psnr_mean}};
  j["ssim"] = {{"per_episode", ssim_per_episode}, {"mean", ssim_mean}};
  j["flow_error"] = {{"per_episode", flow_per_episode}, {"mean", flow_mean}};
  j["fid"] = nullptr;
  j["lpips"] = nullptr;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("metrics report: ") + e.what());
  }
  MetricsReport r;
  r.variant = j.at("variant").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.config_fingerprint = j.value("config_fingerprint", "");
  r.psnr_per_episode = j.at("psnr").at("per_episode").get<std::vector<double>>();
  r.ssim_per_episode = j.at("ssim").at("per_episode").get<std::vector<double>>();
  r.flow_per_episode = j.at("flow_error").at("per_episode").get<std::vector<double>>();
  r.psnr_mean = j.at("psnr").at("mean").get<double>();
  r.ssim_mean = j.at("ssim").at("mean").get<double>();
  r.flow_mean = j.at("flow_error").at("mean").get<double>();
  return r;
}

}  // namespace swm
