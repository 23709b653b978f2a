#pragma once

#include <cstdint>

#include <ATen/core/Generator.h>
#include <torch/torch.h>

namespace pdae {

/// Seeded random stream. All randomness in the library flows through explicit Rng instances so a
/// run is reproducible from its seed.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t seed() const { return seed_; }

    torch::Tensor normal(at::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat32);
    torch::Tensor normal_like(const torch::Tensor& like);
    /// Integers uniform on [low, high), int64 tensor of length n.
    torch::Tensor randint(int64_t low, int64_t high, int64_t n);
    /// Uniform on [0, 1), float64 tensor of length n.
    torch::Tensor uniform(int64_t n);
    double uniform01();

    /// Independent stream identified by (seed, stream).
    Rng fork(uint64_t stream) const;
    /// Copy with its own generator at the current position; copying an Rng shares the generator.
    Rng clone() const;

private:
    uint64_t seed_;
    at::Generator gen_;
};

uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace pdae
