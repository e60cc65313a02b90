#include "spnas/train.hpp"

#include <chrono>

#include "spnas/error.hpp"

namespace spnas {

std::size_t batches_per_epoch(std::size_t n, int batch) {
  if (n < 2) throw ConfigError("need at least 2 training samples");
  const std::size_t b = static_cast<std::size_t>(batch);
  const std::size_t full = n / b, rest = n % b;
  return full + (rest >= 2 ? 1 : 0);
}

BatchStream::BatchStream(std::vector<int> indices, int batch, std::uint64_t seed)
    : base_(std::move(indices)), rng_(seed) {
  const std::size_t n = base_.size();
  const std::size_t count = spnas::batches_per_epoch(n, batch);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t lo = i * static_cast<std::size_t>(batch);
    const std::size_t hi = i + 1 == count ? n : lo + batch;
    bounds_.emplace_back(lo, hi);
  }
  reshuffle();
}

void BatchStream::reshuffle() {
  order_ = shuffled(base_, rng_);
  cursor_ = 0;
}

std::span<const int> BatchStream::next() {
  if (cursor_ == bounds_.size()) reshuffle();
  const auto [lo, hi] = bounds_[cursor_++];
  return std::span<const int>(order_).subspan(lo, hi - lo);
}

double evaluate(const ForwardFn& forward, const Dataset& data, std::span<const int> indices, int batch) {
  if (indices.empty()) throw ConfigError("evaluation split is empty");
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < indices.size(); lo += batch) {
    const auto part = indices.subspan(lo, std::min<std::size_t>(batch, indices.size() - lo));
    Graph g;
    const Tensor logits = forward(g, g.constant(data.batch_images(part)), false).value();
    const int k = logits.dim(1);
    for (std::size_t b = 0; b < part.size(); ++b) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (logits[b * k + c] > logits[b * k + best]) best = c;
      if (best == data.labels[part[b]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

void recalibrate_batchnorm(const std::vector<BatchNorm*>& bns, const ForwardFn& forward, const Dataset& data,
                           std::span<const int> indices, int batch, std::uint64_t seed) {
  for (BatchNorm* bn : bns) bn->reset_stats();
  BatchStream stream(std::vector<int>(indices.begin(), indices.end()), batch, seed);
  // The running average forgets with factor 0.9 per batch; 40 batches leave
  // under 2% weight on the reset values.
  for (int i = 0; i < 40; ++i) {
    Graph g;
    forward(g, g.constant(data.batch_images(stream.next())), true);
  }
}

TrainResult train_network(FixedNetwork& net, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TrainResult result;
  Sgd opt(cfg.momentum);
  opt.add_group({net.params(), 1.0, cfg.weight_decay});
  BatchStream stream(data.train, cfg.batch, seed);
  const std::size_t total =
      cfg.max_steps >= 0 ? static_cast<std::size_t>(cfg.max_steps) : cfg.epochs * stream.batches_per_epoch();
  const auto warmup = static_cast<std::size_t>(cfg.warmup_fraction * static_cast<double>(total));
  result.step_seconds.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto idx = stream.next();
    Graph g;
    Var ce = cross_entropy(net.forward(g, g.constant(data.batch_images(idx)), true), data.batch_labels(idx));
    opt.zero_grad();
    g.backward(ce);
    opt.step(warmup_cosine_lr(cfg.lr, step, total, warmup));
    result.final_ce = ce.item();
    result.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  result.steps = total;
  result.accuracy = evaluate([&](Graph& g, Var x, bool training) { return net.forward(g, x, training); }, data,
                             data.valid);
  return result;
}

TrainResult train_fixed(const SearchSpaceConfig& space, const Architecture& arch, const Dataset& data,
                        const TrainConfig& cfg, std::uint64_t seed) {
  FixedNetwork net(space, arch, seed);
  return train_network(net, data, cfg, seed);
}

}  // namespace spnas
