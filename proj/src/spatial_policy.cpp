#include "dynseg/spatial_policy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dynseg/init.hpp"
#include "dynseg/ops.hpp"

namespace dynseg::policy {

std::string PolicyEntry::label() const {
  switch (action) {
    case Action::Skip: return "skip";
    case Action::Whole: return "whole";
    case Action::Crop: return "crop" + std::to_string(crop_size);
  }
  return "?";
}

PolicySpace::PolicySpace(std::vector<Index> crop_sizes) {
  entries_.push_back({Action::Skip, 0});
  for (std::size_t i = 0; i < crop_sizes.size(); ++i) {
    if (crop_sizes[i] <= 0) throw std::invalid_argument("crop sizes must be positive");
    if (i > 0 && crop_sizes[i] <= crop_sizes[i - 1]) {
      throw std::invalid_argument("crop sizes must be strictly increasing");
    }
    entries_.push_back({Action::Crop, crop_sizes[i]});
  }
  entries_.push_back({Action::Whole, 0});
}

PolicySpace PolicySpace::parse(const std::string& text) {
  std::vector<Index> sizes;
  int skips = 0, wholes = 0;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
               item.end());
    std::transform(item.begin(), item.end(), item.begin(), [](unsigned char c) { return std::tolower(c); });
    if (item == "skip") {
      ++skips;
    } else if (item == "whole") {
      ++wholes;
    } else {
      try {
        std::size_t used = 0;
        sizes.push_back(std::stoll(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw std::invalid_argument("malformed policy space entry '" + item + "' in " + text);
      }
    }
  }
  if (skips > 1 || wholes > 1) throw std::invalid_argument("skip/whole listed more than once: " + text);
  std::sort(sizes.begin(), sizes.end());
  return PolicySpace(std::move(sizes));
}

std::string PolicySpace::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (i) os << ',';
    const auto& e = entries_[i];
    if (e.action == Action::Crop) {
      os << e.crop_size;
    } else {
      os << e.label();
    }
  }
  return os.str();
}

std::vector<Index> PolicySpace::crop_sizes() const {
  std::vector<Index> out;
  for (const auto& e : entries_) {
    if (e.action == Action::Crop) out.push_back(e.crop_size);
  }
  return out;
}

void PolicySpace::validate_for(Index height, Index width) const {
  for (Index p : crop_sizes()) {
    if (p >= std::min(height, width)) {
      throw std::invalid_argument("crop size " + std::to_string(p) + " must be smaller than the " +
                                  std::to_string(height) + "x" + std::to_string(width) + " slice");
    }
  }
}

Center clamp_center(Center c, Index crop_size, Index height, Index width) {
  if (crop_size > std::min(height, width)) {
    throw std::invalid_argument("clamp_center: crop size " + std::to_string(crop_size) +
                                " exceeds image " + std::to_string(height) + "x" + std::to_string(width));
  }
  const double half = static_cast<double>(crop_size) / 2.0;
  c.x = std::clamp(c.x, half, static_cast<double>(width) - half);
  c.y = std::clamp(c.y, half, static_cast<double>(height) - half);
  return c;
}

template <typename T>
BasicTensor<T> clamp_center(const BasicTensor<T>& center, Index crop_size, Index height, Index width) {
  if (center.numel() != 2) throw ShapeError("clamp_center: center must have 2 elements");
  const Center c = clamp_center(Center{static_cast<double>(center.at(0)), static_cast<double>(center.at(1))},
                                crop_size, height, width);
  std::vector<T> out{static_cast<T>(c.x), static_cast<T>(c.y)};
  const T half = static_cast<T>(crop_size) / T(2);
  const T hi_x = static_cast<T>(width) - half, hi_y = static_cast<T>(height) - half;
  return make_result<T>("clamp_center", center.shape(), std::move(out), {center},
                        [center, half, hi_x, hi_y](const TensorNode<T>& self) {
                          auto& g = grad_of(center);
                          const T x = center.at(0), y = center.at(1);
                          if (x >= half && x <= hi_x) g[0] += self.grad[0];
                          if (y >= half && y <= hi_y) g[1] += self.grad[1];
                        });
}

template <typename T>
ConvTrunk<T>::ConvTrunk(Index in_channels, ParamSet<T>& params, Rng& rng) {
  Index c_in = in_channels;
  const Index widths[] = {8, 16, 32, 64};
  for (std::size_t i = 0; i < 4; ++i) {
    const Index c_out = widths[i];
    const std::string p = "trunk" + std::to_string(i) + ".";
    Block b;
    b.w = params.add(p + "conv.weight", he_normal<T>({c_out, c_in, 4, 4}, c_in * 16, rng));
    b.b = params.add(p + "conv.bias", BasicTensor<T>::zeros({c_out}));
    b.gamma = params.add(p + "norm.weight", BasicTensor<T>::full({c_out}, T(1)));
    b.beta = params.add(p + "norm.bias", BasicTensor<T>::zeros({c_out}));
    blocks_.push_back(std::move(b));
    c_in = c_out;
  }
}

template <typename T>
BasicTensor<T> ConvTrunk<T>::forward(const BasicTensor<T>& x) const {
  if (x.rank() != 4 || x.dim(2) < 32 || x.dim(3) < 32) {
    throw ShapeError("policy trunk expects [N,C,H,W] with H,W >= 32, got " + shape_str(x.shape()));
  }
  BasicTensor<T> h = x;
  for (const auto& b : blocks_) {
    h = ops::conv2d(h, b.w, b.b, 2, 1);
    h = ops::instance_norm(h, b.gamma, b.beta, T(1e-5));
    h = ops::leaky_relu(h, T(0.01));
  }
  return ops::global_avg_pool(h);
}

template <typename T>
PolicyNet<T>::PolicyNet(Index in_channels, std::size_t num_actions, std::uint64_t seed)
    : num_actions_(num_actions) {
  Rng rng(seed);
  trunk_.emplace(in_channels, params_, rng);
  const Index K = static_cast<Index>(num_actions);
  head_w_ = params_.add("head.weight", BasicTensor<T>::zeros({K, ConvTrunk<T>::kWidth}));
  head_b_ = params_.add("head.bias", BasicTensor<T>::zeros({K}));
}

template <typename T>
BasicTensor<T> PolicyNet<T>::forward(const BasicTensor<T>& slice) const {
  auto logits = ops::linear(trunk_->forward(slice), head_w_, head_b_);
  return ops::reshape(logits, {static_cast<Index>(num_actions_)});
}

template <typename T>
CropPositionNet<T>::CropPositionNet(Index in_channels, std::uint64_t seed) {
  Rng rng(seed);
  trunk_.emplace(in_channels, params_, rng);
  head_w_ = params_.add("head.weight", BasicTensor<T>::zeros({2, ConvTrunk<T>::kWidth}));
  head_b_ = params_.add("head.bias", BasicTensor<T>::zeros({2}));
}

template <typename T>
BasicTensor<T> CropPositionNet<T>::raw_center(const BasicTensor<T>& slice) const {
  auto s = ops::sigmoid(ops::linear(trunk_->forward(slice), head_w_, head_b_));
  BasicTensor<T> extent({1, 2}, {static_cast<T>(slice.dim(3)), static_cast<T>(slice.dim(2))});
  return ops::reshape(ops::mul(s, extent), {2});
}

template <typename T>
BasicTensor<T> CropPositionNet<T>::forward(const BasicTensor<T>& slice, Index crop_size) const {
  return clamp_center(raw_center(slice), crop_size, slice.dim(2), slice.dim(3));
}

template <typename T>
GumbelSample<T> gumbel_softmax(const BasicTensor<T>& logits, T temperature, Rng* noise, bool hard) {
  if (!(temperature > T(0))) throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
  std::vector<T> g(logits.numel(), T(0));
  if (noise) {
    for (auto& v : g) v = static_cast<T>(-std::log(-std::log(noise->uniform_open())));
  }
  auto perturbed = ops::add(logits, BasicTensor<T>(logits.shape(), std::move(g)));
  auto soft = ops::softmax(ops::scale(perturbed, T(1) / temperature), -1);
  GumbelSample<T> sample;
  for (std::size_t k = 1; k < soft.numel(); ++k) {
    if (soft.at(k) > soft.at(sample.index)) sample.index = k;
  }
  if (hard) {
    std::vector<T> one_hot(soft.numel(), T(0));
    one_hot[sample.index] = T(1);
    sample.probs = ops::straight_through(one_hot, soft);
  } else {
    sample.probs = soft;
  }
  return sample;
}

namespace {

struct Sample {
  Index y0, y1, x0, x1;
  double fy, fx;
  bool inside_y, inside_x;  // false when the coordinate was clamped
};

// Bilinear footprint of a continuous coordinate, clamped to the image.
Sample locate(double y, double x, Index H, Index W) {
  const double yc = std::clamp(y, 0.0, static_cast<double>(H - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(W - 1));
  Sample s;
  s.y0 = static_cast<Index>(std::floor(yc));
  s.x0 = static_cast<Index>(std::floor(xc));
  s.y1 = std::min(s.y0 + 1, H - 1);
  s.x1 = std::min(s.x0 + 1, W - 1);
  s.fy = yc - static_cast<double>(s.y0);
  s.fx = xc - static_cast<double>(s.x0);
  s.inside_y = yc == y;
  s.inside_x = xc == x;
  return s;
}

}  // namespace

template <typename T>
BasicTensor<T> extract_crop(const BasicTensor<T>& image, const BasicTensor<T>& center, Index crop_size) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("extract_crop: expected [1,C,H,W], got " + shape_str(image.shape()));
  }
  if (center.numel() != 2) throw ShapeError("extract_crop: center must have 2 elements");
  const Index C = image.dim(1), H = image.dim(2), W = image.dim(3), P = crop_size;
  if (P < 1 || P > std::min(H, W)) throw ShapeError("extract_crop: crop size out of range");
  const double cx = center.at(0), cy = center.at(1);
  const Index half = P / 2;

  std::vector<Sample> rows(static_cast<std::size_t>(P)), cols(static_cast<std::size_t>(P));
  for (Index i = 0; i < P; ++i) {
    const Sample s = locate(cy + static_cast<double>(i - half), cx + static_cast<double>(i - half), H, W);
    rows[static_cast<std::size_t>(i)] = s;  // y part used
    cols[static_cast<std::size_t>(i)] = s;  // x part used
  }
  auto rows_p = std::make_shared<std::vector<Sample>>(std::move(rows));
  auto cols_p = std::make_shared<std::vector<Sample>>(std::move(cols));

  std::vector<T> out(static_cast<std::size_t>(C * P * P));
  const T* img = image.data().data();
  for (Index c = 0; c < C; ++c) {
    const T* plane = img + c * H * W;
    for (Index i = 0; i < P; ++i) {
      const Sample& r = (*rows_p)[static_cast<std::size_t>(i)];
      const T fy = static_cast<T>(r.fy);
      for (Index j = 0; j < P; ++j) {
        const Sample& q = (*cols_p)[static_cast<std::size_t>(j)];
        const T fx = static_cast<T>(q.fx);
        const T top = plane[r.y0 * W + q.x0] * (T(1) - fx) + plane[r.y0 * W + q.x1] * fx;
        const T bot = plane[r.y1 * W + q.x0] * (T(1) - fx) + plane[r.y1 * W + q.x1] * fx;
        out[static_cast<std::size_t>((c * P + i) * P + j)] = top * (T(1) - fy) + bot * fy;
      }
    }
  }

  return make_result<T>(
      "extract_crop", Shape{1, C, P, P}, std::move(out), {image, center},
      [image, center, rows_p, cols_p, C, H, W, P](const TensorNode<T>& self) {
        const T* img = image.data().data();
        std::vector<T>* gimg = wants_grad(image) ? &grad_of(image) : nullptr;
        T gcx = 0, gcy = 0;
        for (Index c = 0; c < C; ++c) {
          const T* plane = img + c * H * W;
          for (Index i = 0; i < P; ++i) {
            const Sample& r = (*rows_p)[static_cast<std::size_t>(i)];
            const T fy = static_cast<T>(r.fy);
            for (Index j = 0; j < P; ++j) {
              const Sample& q = (*cols_p)[static_cast<std::size_t>(j)];
              const T fx = static_cast<T>(q.fx);
              const T g = self.grad[static_cast<std::size_t>((c * P + i) * P + j)];
              const T v00 = plane[r.y0 * W + q.x0], v01 = plane[r.y0 * W + q.x1];
              const T v10 = plane[r.y1 * W + q.x0], v11 = plane[r.y1 * W + q.x1];
              if (gimg) {
                T* gp = gimg->data() + c * H * W;
                gp[r.y0 * W + q.x0] += g * (T(1) - fy) * (T(1) - fx);
                gp[r.y0 * W + q.x1] += g * (T(1) - fy) * fx;
                gp[r.y1 * W + q.x0] += g * fy * (T(1) - fx);
                gp[r.y1 * W + q.x1] += g * fy * fx;
              }
              if (q.inside_x) gcx += g * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
              if (r.inside_y) gcy += g * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
            }
          }
        }
        if (wants_grad(center)) {
          auto& gc = grad_of(center);
          gc[0] += gcx;
          gc[1] += gcy;
        }
      });
}

template <typename T>
BasicTensor<T> paste_translate(const BasicTensor<T>& features, Center center, Index crop_size,
                               Index height, Index width) {
  if (features.rank() != 4 || features.dim(0) != 1 || features.dim(2) != crop_size ||
      features.dim(3) != crop_size) {
    throw ShapeError("paste_translate: expected [1,C," + std::to_string(crop_size) + "," +
                     std::to_string(crop_size) + "], got " + shape_str(features.shape()));
  }
  const Index C = features.dim(1), P = crop_size, H = height, W = width;
  const double top = center.y - static_cast<double>(P / 2);
  const double left = center.x - static_cast<double>(P / 2);
  constexpr double kSlack = 1e-9;
  if (top < -kSlack || left < -kSlack || top + static_cast<double>(P) > static_cast<double>(H) + kSlack ||
      left + static_cast<double>(P) > static_cast<double>(W) + kSlack) {
    throw ShapeError("paste_translate: patch at center (" + std::to_string(center.x) + ", " +
                     std::to_string(center.y) + ") leaves the " + std::to_string(H) + "x" +
                     std::to_string(W) + " canvas");
  }
  auto rows = std::make_shared<std::vector<Sample>>();
  auto cols = std::make_shared<std::vector<Sample>>();
  for (Index i = 0; i < P; ++i) {
    rows->push_back(locate(top + static_cast<double>(i), 0.0, H, W));
    cols->push_back(locate(0.0, left + static_cast<double>(i), H, W));
  }

  std::vector<T> out(static_cast<std::size_t>(C * H * W), T(0));
  const T* src = features.data().data();
  for (Index c = 0; c < C; ++c) {
    T* plane = out.data() + c * H * W;
    for (Index i = 0; i < P; ++i) {
      const Sample& r = (*rows)[static_cast<std::size_t>(i)];
      const T fy = static_cast<T>(r.fy);
      for (Index j = 0; j < P; ++j) {
        const Sample& q = (*cols)[static_cast<std::size_t>(j)];
        const T fx = static_cast<T>(q.fx);
        const T v = src[(c * P + i) * P + j];
        if (r.fy == 0.0 && q.fx == 0.0) {
          plane[r.y0 * W + q.x0] += v;
          continue;
        }
        plane[r.y0 * W + q.x0] += v * (T(1) - fy) * (T(1) - fx);
        plane[r.y0 * W + q.x1] += v * (T(1) - fy) * fx;
        plane[r.y1 * W + q.x0] += v * fy * (T(1) - fx);
        plane[r.y1 * W + q.x1] += v * fy * fx;
      }
    }
  }
  return make_result<T>(
      "paste_translate", Shape{1, C, H, W}, std::move(out), {features},
      [features, rows, cols, C, P, H, W](const TensorNode<T>& self) {
        auto& g = grad_of(features);
        for (Index c = 0; c < C; ++c) {
          const T* plane = self.grad.data() + c * H * W;
          for (Index i = 0; i < P; ++i) {
            const Sample& r = (*rows)[static_cast<std::size_t>(i)];
            const T fy = static_cast<T>(r.fy);
            for (Index j = 0; j < P; ++j) {
              const Sample& q = (*cols)[static_cast<std::size_t>(j)];
              const T fx = static_cast<T>(q.fx);
              g[static_cast<std::size_t>((c * P + i) * P + j)] +=
                  plane[r.y0 * W + q.x0] * (T(1) - fy) * (T(1) - fx) +
                  plane[r.y0 * W + q.x1] * (T(1) - fy) * fx + plane[r.y1 * W + q.x0] * fy * (T(1) - fx) +
                  plane[r.y1 * W + q.x1] * fy * fx;
            }
          }
        }
      });
}

#define DYNSEG_INSTANTIATE_POLICY(T)                                                              \
  template BasicTensor<T> clamp_center(const BasicTensor<T>&, Index, Index, Index);               \
  template class ConvTrunk<T>;                                                                    \
  template class PolicyNet<T>;                                                                    \
  template class CropPositionNet<T>;                                                              \
  template GumbelSample<T> gumbel_softmax(const BasicTensor<T>&, T, Rng*, bool);                  \
  template BasicTensor<T> extract_crop(const BasicTensor<T>&, const BasicTensor<T>&, Index);      \
  template BasicTensor<T> paste_translate(const BasicTensor<T>&, Center, Index, Index, Index);

DYNSEG_INSTANTIATE_POLICY(float)
DYNSEG_INSTANTIATE_POLICY(double)

}  // namespace dynseg::policy
