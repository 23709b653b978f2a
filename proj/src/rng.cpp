#include "pdae/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace pdae {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    // splitmix64 finalizer over the combined words
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) : seed_(seed), gen_(at::detail::createCPUGenerator(seed)) {}

torch::Tensor Rng::normal(at::IntArrayRef shape, torch::ScalarType dtype) {
    return torch::randn(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::normal_like(const torch::Tensor& like) {
    return normal(like.sizes(), like.scalar_type());
}

torch::Tensor Rng::randint(int64_t low, int64_t high, int64_t n) {
    return torch::randint(low, high, {n}, gen_, torch::TensorOptions().dtype(torch::kLong));
}

torch::Tensor Rng::uniform(int64_t n) {
    return torch::rand({n}, gen_, torch::TensorOptions().dtype(torch::kFloat64));
}

double Rng::uniform01() { return uniform(1).item<double>(); }

Rng Rng::fork(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

Rng Rng::clone() const {
    Rng out(seed_);
    out.gen_ = gen_.clone();
    return out;
}

}  // namespace pdae
