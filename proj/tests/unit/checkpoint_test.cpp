#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <zlib.h>

#include "pdae/checkpoint.hpp"
#include "pdae/errors.hpp"

using namespace pdae;
namespace fs = std::filesystem;

namespace {

Checkpoint sample() {
    Checkpoint c;
    c.meta["kind"] = "test";
    c.meta["alpha"] = "0.5";
    c.tensors["b"] = torch::arange(6, torch::kFloat32).view({2, 3});
    c.tensors["a"] = torch::tensor({1.5f});
    c.tensors["scalar"] = torch::tensor(2.0f);
    return c;
}

}  // namespace

TEST(Checkpoint, ByteIdenticalRoundTrip) {
    const auto bytes = serialize_checkpoint(sample());
    const auto back = deserialize_checkpoint(bytes);
    EXPECT_EQ(back.get("kind"), "test");
    EXPECT_TRUE(torch::equal(back.tensors.at("b"), sample().tensors.at("b")));
    EXPECT_EQ(back.tensors.at("scalar").dim(), 0);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
    const auto p = fs::temp_directory_path() / "pdae_ckpt_test.ckpt";
    save_checkpoint(p.string(), sample());
    const auto back = load_checkpoint(p.string());
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(sample()));
    EXPECT_THROW(load_checkpoint((fs::temp_directory_path() / "missing.ckpt").string()), ConfigError);
}

TEST(Checkpoint, DetectsCorruption) {
    auto bytes = serialize_checkpoint(sample());
    bytes[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(deserialize_checkpoint(bytes), IntegrityError);
    EXPECT_THROW(deserialize_checkpoint("PDAE"), FormatError);
    EXPECT_THROW(deserialize_checkpoint(std::string(64, 'x')), FormatError);
}

TEST(Checkpoint, RejectsOtherVersion) {
    // Rewrite the version field and recompute the trailing CRC so only the version is wrong.
    auto bytes = serialize_checkpoint(sample());
    const uint32_t v = kCheckpointVersion + 1;
    std::memcpy(bytes.data() + 5, &v, 4);
    const auto body = bytes.substr(0, bytes.size() - 4);
    const uint32_t crc = static_cast<uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    std::memcpy(bytes.data() + body.size(), &crc, 4);
    EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, MissingKey) { EXPECT_THROW(sample().get("nope"), ConfigError); }

TEST(Checkpoint, ModuleAndSpecRoundTrip) {
    EpsNetSpec spec;
    spec.image_size = 8;
    spec.base_channels = 8;
    spec.channel_multipliers = {1, 2};
    spec.attention_resolutions = {4};
    spec.time_embed_dim = 16;
    spec.groupnorm_groups = 4;
    spec.num_classes = 3;
    EpsNet a(spec);
    Checkpoint c;
    put_module(c, "m.", *a);
    put_spec(c, "spec.", spec);
    put_schedule(c, "s.", make_linear_schedule(100));
    const auto back = deserialize_checkpoint(serialize_checkpoint(c));
    const auto spec2 = get_eps_spec(back, "spec.");
    EXPECT_EQ(spec2.channel_multipliers, spec.channel_multipliers);
    EXPECT_EQ(spec2.num_classes, 3);
    EpsNet b(spec2);
    get_module(back, "m.", *b);
    EXPECT_EQ(parameter_checksum(*a), parameter_checksum(*b));
    const auto s = get_schedule(back, "s.");
    EXPECT_EQ(s.steps(), 100);
    EXPECT_DOUBLE_EQ(s.beta(57), make_linear_schedule(100).beta(57));

    spec.base_channels = 16;
    EpsNet wider(spec);
    EXPECT_THROW(get_module(back, "m.", *wider), ConfigError);
    EXPECT_THROW(get_module(back, "other.", *b), ConfigError);
}

TEST(Checkpoint, IntLists) {
    EXPECT_EQ(split_ints(join_ints({1, 2, 4})), (std::vector<int64_t>{1, 2, 4}));
    EXPECT_TRUE(split_ints(join_ints({})).empty());
}
