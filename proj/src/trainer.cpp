#include "rashnet/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace rashnet {

namespace {

std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

// Independent stream per (seed, a, b).
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Copies one 3×S×S image into slot `row` of a batch.
void put_image(Tensor& batch, std::int64_t row, const Tensor& image) {
  if (image.rank() != 3 || image.shape() != Shape(batch.shape().begin() + 1, batch.shape().end())) {
    throw ShapeError("batch: image " + shape_str(image.shape()) + " does not fit batch " +
                     shape_str(batch.shape()));
  }
  if (image.dtype() != batch.dtype()) throw ShapeError("batch: mixed dtypes");
  dispatch_dtype(batch.dtype(), [&]<class T>() {
    auto src = image.data<T>();
    auto dst = batch.data<T>();
    std::copy(src.begin(), src.end(), dst.begin() + row * image.numel());
  });
}

Tensor assemble(const ImageSource& source, const std::vector<std::size_t>& rows,
                const std::function<Tensor(Tensor, std::size_t)>& transform) {
  if (rows.empty()) throw DataError("empty batch");
  Tensor first = transform(source.image(rows[0]), 0);
  Shape shape{static_cast<std::int64_t>(rows.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor batch(shape, first.dtype());
  put_image(batch, 0, first);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    put_image(batch, static_cast<std::int64_t>(i), transform(source.image(rows[i]), i));
  }
  return batch;
}

std::vector<int> targets_of(const ImageSource& source, const std::vector<std::size_t>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(source.label(r));
  return out;
}

std::int64_t count_correct(const Tensor& probabilities, const std::vector<int>& targets) {
  const std::int64_t k = probabilities.dim(1);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < k; ++c) {
      if (probabilities.get(static_cast<std::int64_t>(i) * k + c) >
          probabilities.get(static_cast<std::int64_t>(i) * k + best)) {
        best = c;
      }
    }
    correct += best == targets[i] ? 1 : 0;
  }
  return correct;
}

void check_split(const Split& s, const char* what) {
  if (!s.source) throw std::invalid_argument(std::string(what) + ": split has no source");
  if (s.indices.empty()) throw DataError(std::string(what) + ": empty dataset");
  for (auto i : s.indices) {
    if (i >= s.source->size()) throw DataError(std::string(what) + ": sample index out of range");
  }
}

FoldMetrics evaluate_split(Network& net, const Split& split, int fold, int batch_size) {
  const auto scores = predict_scores(net, split, batch_size);
  const auto labels = split.labels();
  return fold_metrics(fold, scores, labels);
}

}  // namespace

// ---------------------------------------------------------------------------

PhaseConfig PhaseConfig::head(std::uint64_t seed) {
  PhaseConfig c;
  c.seed = seed;
  return c;
}

PhaseConfig PhaseConfig::finetune(std::uint64_t seed) {
  PhaseConfig c;
  c.name = "finetune";
  c.epochs = 3;
  c.policy = TrainPolicy::all;
  c.discriminative = true;
  c.seed = seed;
  return c;
}

void PhaseConfig::validate(bool allow_zero_epochs) const {
  if (epochs < (allow_zero_epochs ? 0 : 1)) {
    throw std::invalid_argument("phase " + name + ": epochs must be at least " +
                                (allow_zero_epochs ? "0" : "1"));
  }
  if (batch_size < 1) throw std::invalid_argument("phase " + name + ": batch size must be positive");
  if (discriminative && !(range.lo > 0 && range.lo <= range.hi)) {
    throw std::invalid_argument("phase " + name + ": need 0 < lr lo <= lr hi");
  }
  if (!std::isfinite(lr)) throw std::invalid_argument("phase " + name + ": learning rate is not finite");
}

std::vector<double> PhaseConfig::group_rates(int groups) const {
  if (discriminative) return discriminative_lrs(range.lo, range.hi, groups);
  if (!(lr > 0)) throw std::invalid_argument("phase " + name + ": learning rate not set");
  return std::vector<double>(static_cast<std::size_t>(groups), lr);
}

std::vector<double> discriminative_lrs(double lo, double hi, int groups) {
  if (!(lo > 0) || !(hi > 0)) throw std::invalid_argument("discriminative_lrs: rates must be positive");
  if (lo > hi) throw std::invalid_argument("discriminative_lrs: lo exceeds hi");
  if (groups < 1) throw std::invalid_argument("discriminative_lrs: need at least one group");
  if (groups == 1) return {hi};
  std::vector<double> out;
  for (int g = 0; g < groups; ++g) {
    out.push_back(g == groups - 1 ? hi : lo * std::pow(hi / lo, static_cast<double>(g) / (groups - 1)));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string LrCurve::to_csv() const {
  std::string out = "lr,loss_smoothed\n";
  for (const auto& p : points) out += num(p.lr) + "," + num(p.smoothed_loss) + "\n";
  return out;
}

LrCurve lr_sweep(const std::function<double(double, int)>& step, const LrFindOptions& opt) {
  if (opt.iterations < 1) throw std::invalid_argument("lr_find: iterations must be positive");
  if (!(opt.start > 0 && opt.start < opt.end)) throw std::invalid_argument("lr_find: need 0 < start < end");
  if (!(opt.beta >= 0 && opt.beta < 1)) throw std::invalid_argument("lr_find: beta must lie in [0, 1)");
  if (!(opt.divergence_factor > 1)) throw std::invalid_argument("lr_find: divergence factor must exceed 1");

  LrCurve curve;
  double avg = 0, best = std::numeric_limits<double>::infinity();
  const double ratio = opt.end / opt.start;
  for (int i = 0; i < opt.iterations; ++i) {
    const double lr = opt.iterations == 1 ? opt.start
                                          : opt.start * std::pow(ratio, static_cast<double>(i) / (opt.iterations - 1));
    const double loss = step(lr, i);
    if (i == 0 && !std::isfinite(loss)) throw NumericError("lr_find: non-finite loss at the first step");
    avg = opt.beta * avg + (1 - opt.beta) * loss;
    const double smoothed = avg / (1 - std::pow(opt.beta, i + 1));
    curve.points.push_back({lr, loss, smoothed});
    if (!std::isfinite(smoothed) || smoothed > opt.divergence_factor * best) {
      curve.divergence_index = curve.points.size() - 1;
      break;
    }
    // Later minima win ties so a flat curve suggests the far end.
    if (smoothed <= best) {
      best = smoothed;
      curve.best_index = curve.points.size() - 1;
    }
  }
  curve.suggested_lr = curve.points[curve.best_index].lr / 10.0;
  return curve;
}

std::vector<int> Split::labels() const {
  return targets_of(*source, indices);
}

LrCurve lr_find(Network& net, const Split& data, int batch_size, const OptimizerState& state,
                const LrFindOptions& options, std::uint64_t seed) {
  check_split(data, "lr_find");
  if (batch_size < 1) throw std::invalid_argument("lr_find: batch size must be positive");

  const auto params = net.parameters();
  std::vector<Tensor> saved_params;
  for (const auto& p : params) saved_params.push_back(p.var.value());
  std::vector<Tensor> saved_buffers;
  for (const auto& [name, t] : net.buffers()) saved_buffers.push_back(*t);

  OptimizerState work = state;
  auto rng = derived_rng(seed, 0x1f);
  const auto order = shuffled(data.size(), rng);
  const std::size_t n = data.size(), bs = static_cast<std::size_t>(batch_size);
  const std::vector<double> rates_template(Network::kGroupCount, 0.0);

  auto step = [&](double lr, int i) {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < std::min(bs, n); ++j) {
      rows.push_back(data.indices[order[(static_cast<std::size_t>(i) * bs + j) % n]]);
    }
    Tensor batch = assemble(*data.source, rows, [](Tensor t, std::size_t) { return t; });
    const auto targets = targets_of(*data.source, rows);
    auto ce = softmax_cross_entropy(net.forward(batch, NormMode::train), targets);
    const double loss = ce.loss.value().get(0);
    if (!std::isfinite(loss)) return loss;
    zero_grads(params);
    backward(ce.loss);
    std::vector<double> rates(rates_template.size(), lr);
    sgd_momentum_step(params, work, rates);
    return loss;
  };

  std::optional<LrCurve> curve;
  std::exception_ptr failure;
  try {
    curve = lr_sweep(step, options);
  } catch (...) {
    failure = std::current_exception();
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    Variable v = params[i].var;
    v.mutable_value() = saved_params[i];
  }
  zero_grads(params);
  std::size_t b = 0;
  for (auto& [name, t] : net.buffers()) *t = saved_buffers[b++];
  if (failure) std::rethrow_exception(failure);
  return *curve;
}

// ---------------------------------------------------------------------------

std::string PhaseLog::to_csv() const {
  std::string out = "epoch,phase,mean_loss,sensitivity,specificity,accuracy,auc\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + e.phase + "," + num(e.mean_loss) + ",";
    if (e.validation) {
      out += num(e.validation->sensitivity) + "," + num(e.validation->specificity) + "," +
             num(e.validation->accuracy) + "," + (e.validation->auc ? num(*e.validation->auc) : "");
    } else {
      out += ",,,";
    }
    out += "\n";
  }
  return out;
}

Tensor make_batch(const ImageSource& source, const std::vector<std::size_t>& rows) {
  return assemble(source, rows, [](Tensor t, std::size_t) { return t; });
}

std::vector<double> predict_scores(Network& net, const Split& data, int batch_size) {
  check_split(data, "predict");
  if (batch_size < 1) throw std::invalid_argument("predict: batch size must be positive");
  NoGradGuard guard;
  std::vector<double> scores;
  scores.reserve(data.size());
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < data.size(); start += bs) {
    std::vector<std::size_t> rows(data.indices.begin() + static_cast<std::ptrdiff_t>(start),
                                  data.indices.begin() + static_cast<std::ptrdiff_t>(std::min(start + bs, data.size())));
    Tensor probs = softmax(net.forward(make_batch(*data.source, rows), NormMode::eval).value());
    const std::int64_t k = probs.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      scores.push_back(std::clamp(probs.get(static_cast<std::int64_t>(i) * k + 1), 0.0, 1.0));
    }
  }
  return scores;
}

PhaseLog train_phase(Network& net, const Split& train, const PhaseConfig& config, OptimizerState& state,
                     const Split* validation) {
  config.validate(true);
  check_split(train, "train");
  net.set_trainable(config.policy);
  const auto params = net.parameters();
  const auto rates = config.group_rates(Network::kGroupCount);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const AugmentOptions aug;

  PhaseLog log;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto rng = derived_rng(config.seed, static_cast<std::uint64_t>(epoch));
    const auto order = shuffled(train.size(), rng);
    double loss_sum = 0;
    std::int64_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
      std::vector<std::size_t> rows;
      for (std::size_t j = start; j < std::min(start + bs, order.size()); ++j) {
        rows.push_back(train.indices[order[j]]);
      }
      Tensor batch = assemble(*train.source, rows, [&](Tensor t, std::size_t slot) {
        if (!config.augment) return t;
        auto arng = derived_rng(config.seed ^ 0xa5a5a5a5ULL, static_cast<std::uint64_t>(epoch),
                                start + slot);
        return augment(t, arng, aug);
      });
      const auto targets = targets_of(*train.source, rows);
      auto ce = softmax_cross_entropy(net.forward(batch, NormMode::train), targets);
      const double loss = ce.loss.value().get(0);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss in phase " + config.name + ", epoch " + std::to_string(epoch + 1) +
                           ", batch " + std::to_string(batch_index));
      }
      zero_grads(params);
      backward(ce.loss);
      sgd_momentum_step(params, state, rates);
      ++log.steps;
      loss_sum += loss * static_cast<double>(rows.size());
      correct += count_correct(ce.probabilities, targets);
    }
    zero_grads(params);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.phase = config.name;
    rec.mean_loss = loss_sum / static_cast<double>(train.size());
    rec.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(train.size());
    if (validation) rec.validation = evaluate_split(net, *validation, -1, config.batch_size);
    log.epochs.push_back(std::move(rec));
  }
  return log;
}

// ---------------------------------------------------------------------------

ProtocolResult fit_protocol(const Network& initial, const ImageSource& data, const FoldPlan& plan,
                            PhaseConfig head, const PhaseConfig& finetune, const ProtocolOptions& options) {
  head.validate();
  finetune.validate(true);
  if (plan.fold_of.size() != data.size()) {
    throw DataError("fold plan covers " + std::to_string(plan.fold_of.size()) + " samples, data has " +
                    std::to_string(data.size()));
  }
  std::vector<int> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.label(i);

  ProtocolResult result;
  std::vector<FoldMetrics> head_rows, finetune_rows;
  for (int f = 0; f < plan.k; ++f) {
    FoldOutcome outcome{initial.clone(), {}, {}, {}};
    Network& net = outcome.network;

    Split train{&data, plan.training(f)};
    if (options.oversample) {
      auto balanced = oversample_indices(labels, train.indices);
      train.indices = std::move(balanced.indices);
      outcome.warnings = std::move(balanced.warnings);
    }
    const Split val{&data, plan.validation[static_cast<std::size_t>(f)]};

    PhaseConfig h = head;
    h.seed = head.seed + 1000003ULL * static_cast<std::uint64_t>(f);
    PhaseConfig ft = finetune;
    ft.seed = finetune.seed + 1000003ULL * static_cast<std::uint64_t>(f) + 17;

    OptimizerState state{options.momentum, options.weight_decay, {}};
    if (!(head.lr > 0)) {
      // One sweep on the first fold fixes the rate for every fold.
      net.set_trainable(head.policy);
      auto curve = lr_find(net, train, head.batch_size, state, options.lr_find, head.seed);
      head.lr = curve.suggested_lr;
      result.head_lr_curve = std::move(curve);
    }
    h.lr = head.lr;

    outcome.head_log = train_phase(net, train, h, state, &val);
    FoldMetrics head_row = outcome.head_log.epochs.back().validation.value();
    head_row.fold = f;

    OptimizerState ft_state{options.momentum, options.weight_decay, {}};
    outcome.finetune_log = train_phase(net, train, ft, ft_state, &val);
    FoldMetrics ft_row = outcome.finetune_log.epochs.empty() ? head_row
                                                             : outcome.finetune_log.epochs.back().validation.value();
    ft_row.fold = f;

    std::vector<double> trajectory{head_row.auc.value_or(0.0)};
    for (const auto& e : outcome.finetune_log.epochs) trajectory.push_back(e.validation->auc.value_or(0.0));
    result.auc_trajectory.push_back(std::move(trajectory));

    head_rows.push_back(head_row);
    finetune_rows.push_back(ft_row);
    if (options.on_fold) options.on_fold(f, head_row, ft_row);
    result.folds.push_back(std::move(outcome));
  }

  result.head_lr = head.lr;
  result.head = cross_validate_report(std::move(head_rows), head.name);
  result.finetune = cross_validate_report(std::move(finetune_rows), finetune.name);
  result.head.init = result.finetune.init = options.init;
  const std::size_t points = result.auc_trajectory.front().size();
  result.mean_auc_trajectory.assign(points, 0.0);
  for (const auto& t : result.auc_trajectory) {
    for (std::size_t i = 0; i < points; ++i) result.mean_auc_trajectory[i] += t[i] / plan.k;
  }
  return result;
}

}  // namespace rashnet
