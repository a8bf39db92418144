#include "qdtune/dqc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace qdtune::dqc {

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::string state_name(int s) { return std::string(to_string(static_cast<State>(s))); }

}  // namespace

MaeCurves build_mae_curves(const std::vector<double>& mae, const std::vector<double>& noise_scale,
                           const std::vector<State>& state, int bins, double lo, double hi) {
  if (mae.size() != noise_scale.size() || mae.size() != state.size())
    throw std::invalid_argument("build_mae_curves: input size mismatch");
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("build_mae_curves: bad binning");
  MaeCurves c;
  c.scale_min = lo;
  c.scale_max = hi;
  c.bins = bins;
  std::vector<std::vector<double>> sum(kStateCount, std::vector<double>(bins, 0.0));
  std::vector<std::vector<std::size_t>> count(kStateCount, std::vector<std::size_t>(bins, 0));
  for (std::size_t i = 0; i < mae.size(); ++i) {
    if (noise_scale[i] < lo || noise_scale[i] > hi) continue;
    const int b = std::min(bins - 1, static_cast<int>((noise_scale[i] - lo) / c.bin_width()));
    const int s = static_cast<int>(state[i]);
    sum[s][b] += mae[i];
    ++count[s][b];
  }
  for (int s = 0; s < kStateCount; ++s) {
    auto& curve = c.states[s];
    for (int b = 0; b < bins; ++b) {
      if (count[s][b] == 0) continue;
      curve.centers.push_back(lo + (b + 0.5) * c.bin_width());
      curve.mean_mae.push_back(sum[s][b] / static_cast<double>(count[s][b]));
      curve.counts.push_back(count[s][b]);
    }
    curve.available = !curve.centers.empty();
    if (curve.available) {
      curve.min = *std::min_element(curve.mean_mae.begin(), curve.mean_mae.end());
      curve.max = *std::max_element(curve.mean_mae.begin(), curve.mean_mae.end());
    }
  }
  return c;
}

MaeCurves build_mae_curves(std::vector<nn::Network<float>>& dse, const std::vector<data::Sample>& sweep, int bins,
                           bool clip) {
  if (sweep.empty()) throw std::invalid_argument("build_mae_curves: empty sweep set");
  const auto report = dse::evaluate(dse, dse::state_images(sweep, clip));
  const Eigen::VectorXd mae = dse::sample_mae(report.predictions, report.targets);
  std::vector<double> m(mae.data(), mae.data() + mae.size()), scale;
  std::vector<State> state;
  for (const auto& s : sweep) {
    scale.push_back(s.noise_scale);
    state.push_back(s.state_label.dominant());
  }
  return build_mae_curves(m, scale, state, bins, 0.0, 7.0);
}

double crossing(const StateCurve& curve, double fraction) {
  if (!curve.available) throw CalibrationError("crossing on an unavailable curve");
  const double level = curve.min + fraction * curve.range();
  const auto& y = curve.mean_mae;
  const auto& x = curve.centers;
  const std::size_t start = static_cast<std::size_t>(std::min_element(y.begin(), y.end()) - y.begin());
  for (std::size_t i = start; i < y.size(); ++i) {
    if (y[i] < level) continue;
    if (i == start) return x[i];
    return x[i - 1] + (level - y[i - 1]) / (y[i] - y[i - 1]) * (x[i] - x[i - 1]);
  }
  return x.back();
}

QualityThresholds calibrate_thresholds(const MaeCurves& curves, double flat_epsilon) {
  QualityThresholds t;
  double nd_lower = std::numeric_limits<double>::infinity(), nd_upper = nd_lower;
  for (State s : {State::LD, State::CD, State::RD, State::DD}) {
    const auto& c = curves[s];
    if (!c.available) throw CalibrationError("no MAE curve for state " + std::string(to_string(s)));
    if (c.range() < flat_epsilon)
      throw CalibrationError("MAE curve for state " + std::string(to_string(s)) + " is flat (range " +
                             std::to_string(c.range()) + ")");
    t[s].lower = crossing(c, kLowerFraction);
    t[s].upper = crossing(c, kUpperFraction);
    if (!(t[s].upper > t[s].lower)) t[s].upper = t[s].lower + curves.bin_width();
    nd_lower = std::min(nd_lower, t[s].lower);
    nd_upper = std::min(nd_upper, t[s].upper);
  }
  t[State::ND].lower = nd_lower;
  t[State::ND].upper = nd_upper;
  t.validate();
  return t;
}

void to_json(nlohmann::json& j, const MaeCurves& c) {
  j = nlohmann::json{{"scale_min", c.scale_min}, {"scale_max", c.scale_max}, {"bins", c.bins}};
  nlohmann::json states = nlohmann::json::object();
  for (int s = 0; s < kStateCount; ++s) {
    const auto& curve = c.states[s];
    states[state_name(s)] = {{"available", curve.available}, {"centers", curve.centers},
                             {"mean_mae", curve.mean_mae},   {"counts", curve.counts},
                             {"min", curve.min},             {"max", curve.max}};
  }
  j["states"] = states;
}

Eigen::VectorXf quality_input(const GridF& gradient) {
  Eigen::VectorXf x = Eigen::Map<const Eigen::VectorXf>(gradient.data(), gradient.size());
  if (!x.allFinite()) throw std::invalid_argument("quality_input: non-finite input");
  x.array() -= x.mean();
  return x;
}

nn::LabeledImages quality_images(const std::vector<data::Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("quality_images: no samples");
  nn::LabeledImages out;
  out.height = static_cast<int>(samples[0].gradient.rows());
  out.width = static_cast<int>(samples[0].gradient.cols());
  out.inputs.resize(static_cast<Eigen::Index>(out.height) * out.width, static_cast<Eigen::Index>(samples.size()));
  out.targets = nn::Mat<float>::Zero(kQualityCount, static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].quality) throw std::invalid_argument("quality_images: sample " + std::to_string(i) + " has no quality label");
    out.inputs.col(static_cast<Eigen::Index>(i)) = quality_input(samples[i].gradient);
    out.targets(static_cast<int>(*samples[i].quality), static_cast<Eigen::Index>(i)) = 1.0f;
  }
  return out;
}

dse::TrainedEnsemble train_dqc(const nn::LabeledImages& train, const nn::LabeledImages& val, const DqcOptions& options,
                               std::vector<std::string>* warnings) {
  const Eigen::VectorXf share = train.targets.rowwise().sum() / static_cast<float>(std::max<Eigen::Index>(1, train.size()));
  for (int q = 0; q < kQualityCount; ++q)
    if (share[q] < 0.05f) {
      const std::string w = "class imbalance: quality '" + std::string(to_string(static_cast<Quality>(q))) +
                            "' is " + std::to_string(100.0 * share[q]) + "% of the training set";
      if (warnings) warnings->push_back(w);
      if (options.log) options.log("warning: " + w);
    }
  dse::EnsembleOptions e;
  e.spec = nn::NetworkSpec::dqc();
  e.models = options.models;
  e.seed = options.seed;
  e.epochs = options.epochs;
  e.batch_size = options.batch_size;
  e.patience = options.patience;
  e.log = options.log;
  return dse::train_ensemble(train, val, e);
}

nn::Mat<float> predict_quality(std::vector<nn::Network<float>>& dqc, const nn::Mat<float>& inputs) {
  if (dqc.empty()) throw std::invalid_argument("predict_quality: no models");
  nn::Mat<float> p = nn::Mat<float>::Zero(kQualityCount, inputs.cols());
  for (auto& net : dqc) {
    if (net.spec().outputs != kQualityCount) throw std::invalid_argument("predict_quality: not a 3-class model");
    p += nn::predict(net, inputs) / static_cast<float>(dqc.size());
  }
  return p;
}

Quality predict_quality(std::vector<nn::Network<float>>& dqc, const GridF& gradient) {
  const nn::Mat<float> p = predict_quality(dqc, nn::Mat<float>(quality_input(gradient)));
  Eigen::Index q = 0;
  p.col(0).maxCoeff(&q);
  return static_cast<Quality>(q);
}

CorrelationReport validate_quality_correlation(std::vector<nn::Network<float>>& dqc,
                                               std::vector<nn::Network<float>>& dse,
                                               const std::vector<data::Sample>& samples, bool clip,
                                               std::size_t min_class_samples) {
  if (samples.empty()) throw std::invalid_argument("validate_quality_correlation: empty dataset");
  if (dse.empty()) throw std::invalid_argument("validate_quality_correlation: no DSE models");
  nn::Mat<float> qin(static_cast<Eigen::Index>(samples[0].gradient.size()), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) qin.col(static_cast<Eigen::Index>(i)) = quality_input(samples[i].gradient);
  const nn::Mat<float> qp = predict_quality(dqc, qin);
  std::vector<int> predicted(samples.size());
  std::size_t labelled = 0, agree = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Eigen::Index q = 0;
    qp.col(static_cast<Eigen::Index>(i)).maxCoeff(&q);
    predicted[i] = static_cast<int>(q);
    if (samples[i].quality) {
      ++labelled;
      agree += static_cast<int>(*samples[i].quality) == predicted[i];
    }
  }

  CorrelationReport r;
  r.dqc_accuracy = labelled ? static_cast<double>(agree) / static_cast<double>(labelled) : 0.0;
  const auto images = dse::state_images(samples, clip);
  std::vector<nn::Mat<float>> preds;
  for (auto& net : dse) preds.push_back(nn::predict(net, images.inputs));

  for (int q = 0; q < kQualityCount; ++q) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (predicted[i] == q) idx.push_back(static_cast<Eigen::Index>(i));
    auto& c = r.classes[q];
    c.count = idx.size();
    c.included = c.count >= min_class_samples;
    if (idx.empty()) continue;
    nn::Mat<float> t(kStateCount, static_cast<Eigen::Index>(idx.size())), p(kStateCount, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) t.col(static_cast<Eigen::Index>(k)) = images.targets.col(idx[k]);
    for (const auto& pm : preds) {
      for (std::size_t k = 0; k < idx.size(); ++k) p.col(static_cast<Eigen::Index>(k)) = pm.col(idx[k]);
      const auto m = dse::score(p, t);
      c.model_accuracy.push_back(m.accuracy);
      c.model_mae.push_back(m.mae);
    }
    std::tie(c.accuracy_mean, c.accuracy_std) = mean_std(c.model_accuracy);
    std::tie(c.mae_mean, c.mae_std) = mean_std(c.model_mae);
    if (!c.included)
      r.notes.push_back("class " + std::string(to_string(static_cast<Quality>(q))) + " has " + std::to_string(c.count) +
                        " samples (< " + std::to_string(min_class_samples) + "); excluded from ordering checks");
  }

  std::vector<const ClassStats*> inc;
  for (const auto& c : r.classes)
    if (c.included) inc.push_back(&c);
  r.ordering_checked = inc.size() >= 2;
  if (r.ordering_checked) {
    r.accuracy_ordering = r.mae_ordering = r.variance_ordering = true;
    for (std::size_t k = 1; k < inc.size(); ++k) {
      r.accuracy_ordering = r.accuracy_ordering && inc[k - 1]->accuracy_mean > inc[k]->accuracy_mean;
      r.mae_ordering = r.mae_ordering && inc[k - 1]->mae_mean < inc[k]->mae_mean;
      r.variance_ordering = r.variance_ordering && inc[k - 1]->accuracy_std < inc[k]->accuracy_std;
    }
  } else {
    r.notes.push_back("fewer than two classes have enough samples; ordering assertions skipped");
  }
  return r;
}

void to_json(nlohmann::json& j, const CorrelationReport& r) {
  j = nlohmann::json::object();
  nlohmann::json classes = nlohmann::json::object();
  for (int q = 0; q < kQualityCount; ++q) {
    const auto& c = r.classes[q];
    classes[std::string(to_string(static_cast<Quality>(q)))] = {
        {"count", c.count},
        {"included", c.included},
        {"model_accuracy", c.model_accuracy},
        {"model_mae", c.model_mae},
        {"accuracy_mean", c.accuracy_mean},
        {"accuracy_std", c.accuracy_std},
        {"accuracy_percent", dse::value_uncertainty(100.0 * c.accuracy_mean, 100.0 * c.accuracy_std)},
        {"mae_mean", c.mae_mean},
        {"mae_std", c.mae_std}};
  }
  j["classes"] = classes;
  j["dqc_accuracy"] = r.dqc_accuracy;
  j["ordering_checked"] = r.ordering_checked;
  j["accuracy_ordering"] = r.accuracy_ordering;
  j["mae_ordering"] = r.mae_ordering;
  j["variance_ordering"] = r.variance_ordering;
  j["notes"] = r.notes;
}

}  // namespace qdtune::dqc
