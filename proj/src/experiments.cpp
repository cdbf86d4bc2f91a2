// SPDX-License-Identifier: Apache-2.0

#include "absvit/experiments.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace absvit::exp {

namespace {

using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int parse_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw std::invalid_argument(what + " '" + s + "' is not an integer");
  return static_cast<int>(v);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

num::Tensor<float> stack(const std::vector<const data::Image*>& images) {
  if (images.empty()) throw std::invalid_argument("no images to stack");
  const std::size_t h = images[0]->height, w = images[0]->width;
  std::vector<float> px;
  px.reserve(images.size() * h * w);
  for (const auto* im : images) px.insert(px.end(), im->pixels.begin(), im->pixels.end());
  return num::Tensor<float>({images.size(), h, w}, px);
}

RowMatD as_matrix(const num::Tensor<float>& t) {
  const auto cols = static_cast<Eigen::Index>(t.dim(t.rank() - 1));
  const auto rows = static_cast<Eigen::Index>(t.size()) / cols;
  return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data().data(), rows,
                                                                                                  cols)
      .cast<double>();
}

// Runs `fn(indices, prior)` once per cued class, so each group shares one prior.
template <typename Fn>
void by_cued_class(const std::vector<data::CompositeSample>& comps, data::Side side, Fn fn) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < comps.size(); ++i) groups[comps[i].class_on(side)].push_back(i);
  for (const auto& [cls, idx] : groups) fn(cls, idx);
}

num::Tensor<float> subset(const std::vector<data::CompositeSample>& comps, const std::vector<std::size_t>& idx) {
  std::vector<const data::Image*> ims;
  for (auto i : idx) ims.push_back(&comps[i].image);
  return stack(ims);
}

std::vector<data::CompositeSample> make_composites(const data::DataConfig& config, std::size_t n,
                                                   std::optional<std::pair<int, int>> classes) {
  std::vector<data::CompositeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(steer_composite(i, config, classes));
  return out;
}

double cued_share(const num::Tensor<float>& norm_map, std::size_t image, int grid, data::Side side) {
  const std::size_t n = static_cast<std::size_t>(grid) * grid;
  double total = 0.0, cued = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double v = norm_map.data()[image * n + t];
    const int col = static_cast<int>(t % grid);
    const bool left = col < grid / 2;
    total += v;
    if (left == (side == data::Side::left)) cued += v;
  }
  return total > 0 ? cued / total : 0.0;
}

}  // namespace

PriorChoice PriorChoice::parse(const std::string& text) {
  PriorChoice p;
  if (text == "learned") return p;
  if (text == "none") {
    p.kind = Kind::none;
    return p;
  }
  if (text.rfind("class:", 0) == 0) {
    p.kind = Kind::class_prototype;
    p.class_id = parse_int(text.substr(6), "class id");
    if (p.class_id < 0) throw std::invalid_argument("class id must be >= 0");
    return p;
  }
  throw std::invalid_argument("prior '" + text + "' is not learned, none or class:ID");
}

std::string PriorChoice::str() const {
  switch (kind) {
    case Kind::learned: return "learned";
    case Kind::none: return "none";
    case Kind::class_prototype: return "class:" + std::to_string(class_id);
  }
  return "learned";
}

model::PriorSpec PriorChoice::resolve(const model::ParamMap<float>& params) const {
  if (kind == Kind::class_prototype) return model::PriorSpec::external(prototype(params, class_id));
  return model::PriorSpec::learned();
}

std::vector<double> prototype(const model::ParamMap<float>& params, int class_id) {
  const auto row = data::class_prototype(params.at("head.weight"), class_id);
  return {row.begin(), row.end()};
}

data::CompositeSample steer_composite(std::size_t index, const data::DataConfig& config,
                                      std::optional<std::pair<int, int>> classes) {
  const auto [a, b] = classes ? *classes : data::composite_classes(index);
  return data::gen_two_object(a, b, data::split_base(data::Split::steer) + index, config);
}

SteerReport steer(train::Predictor& predictor, const data::DataConfig& config, std::size_t images, double alpha,
                  std::optional<std::pair<int, int>> classes) {
  if (images == 0) throw std::invalid_argument("steering needs at least one image");
  const auto comps = make_composites(config, images, classes);
  std::vector<const data::Image*> all;
  for (const auto& c : comps) all.push_back(&c.image);
  const auto base = predictor.run(stack(all), 0.0).at("logits");
  const std::size_t K = base.dim(1);
  auto logit = [&](const num::Tensor<float>& l, std::size_t row, int k) { return double(l.data()[row * K + k]); };
  auto argmax = [&](const num::Tensor<float>& l, std::size_t row) {
    const auto d = l.data().subspan(row * K, K);
    return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
  };

  SteerReport rep;
  rep.alpha = alpha;
  rep.rows.resize(2 * images);
  double hits_base = 0, hits_steer = 0;
  for (data::Side side : {data::Side::left, data::Side::right}) {
    const std::size_t slot = side == data::Side::left ? 0 : 1;
    by_cued_class(comps, side, [&](int cls, const std::vector<std::size_t>& idx) {
      const auto steered =
          predictor.run(subset(comps, idx), alpha, model::PriorSpec::external(prototype(predictor.params(), cls)))
              .at("logits");
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const std::size_t i = idx[j];
        SteerRow r;
        r.index = i;
        r.left_class = comps[i].left_class;
        r.right_class = comps[i].right_class;
        r.cued = side;
        r.cued_class = cls;
        r.other_class = comps[i].class_on(side == data::Side::left ? data::Side::right : data::Side::left);
        r.gap_base = logit(base, i, r.cued_class) - logit(base, i, r.other_class);
        r.gap_steer = logit(steered, j, r.cued_class) - logit(steered, j, r.other_class);
        r.success = r.gap_steer > r.gap_base;
        hits_base += argmax(base, i) == r.cued_class;
        hits_steer += argmax(steered, j) == r.cued_class;
        rep.rows[2 * i + slot] = r;
      }
    });
  }
  double left = 0, right = 0;
  for (const auto& r : rep.rows) (r.cued == data::Side::left ? left : right) += r.success;
  rep.success_left = left / double(images);
  rep.success_right = right / double(images);
  rep.argmax_cued_base = hits_base / double(2 * images);
  rep.argmax_cued_steer = hits_steer / double(2 * images);
  return rep;
}

std::vector<SweepPoint> alpha_sweep(train::Predictor& predictor, const data::DataConfig& config, std::size_t images,
                                    const std::vector<double>& alphas) {
  if (images == 0) throw std::invalid_argument("alpha sweep needs at least one image");
  const auto comps = make_composites(config, images, std::nullopt);
  const int grid = predictor.config().grid();
  std::vector<SweepPoint> out;
  for (double alpha : alphas) {
    SweepPoint pt;
    pt.alpha = alpha;
    for (data::Side side : {data::Side::left, data::Side::right}) {
      double sum = 0.0;
      by_cued_class(comps, side, [&](int cls, const std::vector<std::size_t>& idx) {
        const auto out_map =
            predictor.run(subset(comps, idx), alpha, model::PriorSpec::external(prototype(predictor.params(), cls)));
        const auto& norms = out_map.at("norm_map");
        for (std::size_t j = 0; j < idx.size(); ++j) sum += cued_share(norms, j, grid, side);
      });
      (side == data::Side::left ? pt.cued_mass_left : pt.cued_mass_right) = sum / double(images);
    }
    pt.cued_mass = 0.5 * (pt.cued_mass_left + pt.cued_mass_right);
    out.push_back(pt);
  }
  return out;
}

bool non_decreasing(const std::vector<SweepPoint>& sweep, double slack) {
  for (std::size_t i = 1; i < sweep.size(); ++i) {
    if (sweep[i].cued_mass < (1.0 - slack) * sweep[i - 1].cued_mass) return false;
  }
  return true;
}

ProbeReport probe(train::Predictor& predictor, const data::DataConfig& config, std::size_t fit_images,
                  std::size_t eval_images, double alpha) {
  if (fit_images == 0 || eval_images == 0) throw std::invalid_argument("probe needs fit and eval images");
  const auto& mc = predictor.config();
  const int p = mc.patch, g = mc.grid(), S = mc.image_size;
  const std::size_t N = static_cast<std::size_t>(mc.tokens()), pd = static_cast<std::size_t>(p * p);

  // Fit on bottom-up signals of single-object training images.
  const auto fit_set = data::make_dataset(data::Split::train, fit_images, config);
  const auto fit_out = predictor.run(fit_set.batch(0, fit_images), alpha);
  auto it = fit_out.find("x0_bu");
  if (it == fit_out.end()) throw std::invalid_argument("probe needs a predictor with full traces (x0_bu missing)");
  const RowMatD X = as_matrix(it->second);
  const RowMatD Y = as_matrix(fit_out.at("z0"));
  RowMatD Xa(X.rows(), X.cols() + 1);
  Xa << X, Eigen::VectorXd::Ones(X.rows());
  const Eigen::MatrixXd W = Xa.colPivHouseholderQr().solve(Eigen::MatrixXd(Y));
  auto decode = [&](const RowMatD& x) {
    RowMatD xa(x.rows(), x.cols() + 1);
    xa << x, Eigen::VectorXd::Ones(x.rows());
    return RowMatD(xa * W);
  };

  ProbeReport rep;
  rep.alpha = alpha;
  rep.fit_images = fit_images;
  rep.eval_images = eval_images;
  rep.fit_error = (decode(X) - Y).squaredNorm() / double(Y.size());

  const auto comps = make_composites(config, eval_images, std::nullopt);
  struct Acc {
    double fg = 0, bg = 0;
    std::size_t nfg = 0, nbg = 0;
  } acc_bu, acc_td, acc_sum;
  for (data::Side side : {data::Side::left, data::Side::right}) {
    by_cued_class(comps, side, [&](int cls, const std::vector<std::size_t>& idx) {
      const auto out =
          predictor.run(subset(comps, idx), alpha, model::PriorSpec::external(prototype(predictor.params(), cls)));
      const RowMatD bu = as_matrix(out.at("x0_bu")), td = as_matrix(out.at("x0_td"));
      const RowMatD truth = as_matrix(out.at("z0"));
      const RowMatD rec_bu = decode(bu), rec_td = decode(td), rec_sum = decode(bu + td);
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const auto& comp = comps[idx[j]];
        const auto& mask = side == data::Side::left ? comp.left_mask : comp.right_mask;
        for (std::size_t t = 0; t < N; ++t) {
          const int gy = static_cast<int>(t) / g, gx = static_cast<int>(t) % g;
          const auto row = static_cast<Eigen::Index>(j * N + t);
          for (std::size_t q = 0; q < pd; ++q) {
            const int y = gy * p + static_cast<int>(q) / p, x = gx * p + static_cast<int>(q) % p;
            const bool fg = mask[static_cast<std::size_t>(y) * S + x] != 0;
            const auto col = static_cast<Eigen::Index>(q);
            const double target = truth(row, col);
            for (auto [acc, rec] : {std::pair{&acc_bu, &rec_bu}, std::pair{&acc_td, &rec_td}, std::pair{&acc_sum, &rec_sum}}) {
              const double e = (*rec)(row, col) - target;
              if (fg) {
                acc->fg += e * e;
                ++acc->nfg;
              } else {
                acc->bg += e * e;
                ++acc->nbg;
              }
            }
          }
        }
        if (side == data::Side::left && idx[j] == 0) {
          auto image_of = [&](const RowMatD& m) {
            std::vector<double> rows(m.data() + j * N * pd, m.data() + (j + 1) * N * pd);
            return unpatchify(rows, S, p);
          };
          rep.example = {comp.image.pixels, image_of(rec_bu), image_of(rec_td), image_of(rec_sum)};
        }
      }
    });
  }
  auto finish = [](const Acc& a) {
    ProbeErrors e;
    e.foreground = a.nfg ? a.fg / double(a.nfg) : 0.0;
    e.background = a.nbg ? a.bg / double(a.nbg) : 0.0;
    e.all = (a.fg + a.bg) / double(std::max<std::size_t>(1, a.nfg + a.nbg));
    return e;
  };
  rep.bu = finish(acc_bu);
  rep.td = finish(acc_td);
  rep.combined = finish(acc_sum);
  return rep;
}

NormMap token_norm_map(train::Predictor& predictor, const num::Tensor<float>& image, double alpha,
                       const model::PriorSpec& prior) {
  if (image.rank() != 3 || image.dim(0) != 1) throw num::ShapeError("expected a single [1, H, W] image");
  const auto out = predictor.run(image, alpha, prior);
  auto it = out.find("norm_map");
  if (it == out.end()) throw std::invalid_argument("token norm map needs a predictor with full traces");
  NormMap m;
  m.rows = m.cols = predictor.config().grid();
  m.values.assign(it->second.data().begin(), it->second.data().end());
  return m;
}

num::Tensor<float> parse_image_spec(const std::string& spec, const data::DataConfig& config) {
  const auto parts = split(spec, ':');
  const std::size_t H = static_cast<std::size_t>(config.height), W = static_cast<std::size_t>(config.width);
  if (parts.size() == 3 && parts[0] == "single") {
    const auto s = data::gen_single_object(parse_int(parts[1], "class"), std::uint64_t(parse_int(parts[2], "seed")),
                                           config);
    return num::Tensor<float>({1, H, W}, s.image.pixels);
  }
  if (parts.size() == 4 && parts[0] == "composite") {
    const int a = parse_int(parts[1], "class"), b = parse_int(parts[2], "class");
    const auto c = data::gen_two_object(a, b, std::uint64_t(parse_int(parts[3], "seed")), config);
    return num::Tensor<float>({1, H, W}, c.image.pixels);
  }
  throw std::invalid_argument("image spec '" + spec + "' is not single:CLASS:SEED or composite:A:B:SEED");
}

void write_pgm(const std::string& path, const std::vector<double>& values, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || values.size() != std::size_t(rows) * cols) {
    throw std::invalid_argument("pgm size does not match the value count");
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << cols << " " << rows << "\n255\n";
  for (double v : values) {
    const double u = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u))));
  }
}

std::vector<unsigned char> read_pgm(const std::string& path, int& rows, int& cols) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int maxval = 0;
  if (!(in >> magic >> cols >> rows >> maxval) || magic != "P5" || maxval != 255) {
    throw std::runtime_error("not an 8-bit P5 graymap: " + path);
  }
  in.get();
  std::vector<unsigned char> px(std::size_t(rows) * cols);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!in) throw std::runtime_error("truncated graymap: " + path);
  return px;
}

void write_norm_csv(const std::string& path, const NormMap& map) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(9);
  out << "row,col,norm\n";
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) out << r << "," << c << "," << map.values[std::size_t(r) * map.cols + c] << "\n";
}

std::vector<float> unpatchify(const std::vector<double>& patches, int image_size, int patch) {
  const int g = image_size / patch;
  const std::size_t per_image = std::size_t(image_size) * image_size;
  if (patches.size() % per_image != 0) throw std::invalid_argument("patch rows do not fill whole images");
  const std::size_t n = patches.size() / per_image;
  std::vector<float> out(patches.size());
  for (std::size_t b = 0; b < n; ++b)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px) {
            const std::size_t src = ((b * g + gy) * g + gx) * patch * patch + py * patch + px;
            out[b * per_image + std::size_t(gy * patch + py) * image_size + gx * patch + px] =
                static_cast<float>(patches[src]);
          }
  return out;
}

}  // namespace absvit::exp
