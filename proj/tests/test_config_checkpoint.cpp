#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "m2s/checkpoint.hpp"
#include "m2s/config.hpp"
#include "m2s/model.hpp"

using namespace m2s;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
    auto dir = fs::temp_directory_path() / "m2s_test_ckpt";
    fs::create_directories(dir);
    return (dir / name).string();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config round-trips losslessly through its serialized form") {
    RunConfig cfg;
    cfg.phase1_lr = 3e-3;
    cfg.seed = 12345;
    cfg.attention = "cbam";
    cfg.backbone_channels = {4, 8, 12, 16, 20};
    RunConfig back = RunConfig::parse(cfg.serialize());
    CHECK(back == cfg);
    CHECK(back.serialize() == cfg.serialize());
}

TEST_CASE("config save/load from disk") {
    RunConfig cfg;
    cfg.train_count = 17;
    const std::string path = temp_path("cfg.txt");
    cfg.save(path);
    RunConfig back = RunConfig::load(path);
    CHECK(back.train_count == 17);
    CHECK(back.serialize() == cfg.serialize());
}

TEST_CASE("unknown keys and malformed values are rejected") {
    CHECK_THROWS_AS(RunConfig::parse("bogus.key = 3\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("train.batch_size = banana\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("model.cam.enabled = yes\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("no equals sign here\n"), ValidationError);
}

TEST_CASE("config validation rejects bad ranges") {
    CHECK_THROWS_AS(RunConfig::parse("train.phase1.lr = -1\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("data.image_size = 48\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("data.size_min = 1\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("model.attention = bogus\n"), ValidationError);
    CHECK_THROWS_AS(RunConfig::parse("train.phase1.epochs = -2\n"), ValidationError);
}

TEST_CASE("comments and blank lines are accepted") {
    RunConfig cfg = RunConfig::parse("# comment\n\nmodel.num_classes = 3\n");
    CHECK(cfg.num_classes == 3);
}

TEST_CASE("model hash tracks the model section only") {
    RunConfig a;
    RunConfig b;
    b.seed = 999;           // train section
    b.train_count = 3;      // data section
    CHECK(a.model_hash() == b.model_hash());
    RunConfig c;
    c.head_channels = 32;   // model section
    CHECK(a.model_hash() != c.model_hash());
}

TEST_CASE("relative paths resolve against the config directory") {
    RunConfig cfg;
    cfg.config_dir = "/somewhere";
    cfg.data_dir = "data";
    CHECK(cfg.resolved_data_dir() == "/somewhere/data");
    cfg.data_dir = "/absolute/data";
    CHECK(cfg.resolved_data_dir() == "/absolute/data");
}

namespace {

ModelDesc small_desc() {
    ModelDesc d;
    d.num_classes = 2;
    d.backbone_channels = {4, 6, 8, 10, 12};
    d.cam_channels = {8, 12, 16};
    d.head_channels = 8;
    return d;
}

}  // namespace

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
    Model<float> model(small_desc(), 7);
    ParamRefs<float> params = model.named_parameters();
    const std::string path = temp_path("model.ckpt");
    save_checkpoint(path, params, 0xDEADBEEFull);

    // capture, then clobber, then reload
    std::vector<std::vector<float>> original;
    for (const auto& p : params) original.push_back(p.tensor.value());
    for (auto& p : params) {
        for (auto& v : p.tensor.mutable_value()) v = -99.f;
    }
    load_checkpoint(path, params, 0xDEADBEEFull);
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(params[i].tensor.value() == original[i]);
    }

    // a second save of the reloaded model is byte-identical
    const std::string path2 = temp_path("model2.ckpt");
    save_checkpoint(path2, params, 0xDEADBEEFull);
    CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("checkpoint parameter names are lexicographically ordered and unique") {
    Model<float> model(small_desc(), 3);
    ParamRefs<float> params = model.named_parameters();
    for (std::size_t i = 1; i < params.size(); ++i) {
        CHECK(params[i - 1].name < params[i].name);
    }
}

TEST_CASE("hash mismatch is rejected unless forced") {
    Model<float> model(small_desc(), 7);
    ParamRefs<float> params = model.named_parameters();
    const std::string path = temp_path("hash.ckpt");
    save_checkpoint(path, params, 0x1111ull);
    CHECK(checkpoint_config_hash(path) == 0x1111ull);
    CHECK_THROWS_AS(load_checkpoint(path, params, 0x2222ull), ValidationError);
    CHECK_NOTHROW(load_checkpoint(path, params, 0x2222ull, /*force=*/true));
}

TEST_CASE("name or shape drift is rejected at load") {
    Model<float> model(small_desc(), 7);
    ParamRefs<float> params = model.named_parameters();
    const std::string path = temp_path("drift.ckpt");
    save_checkpoint(path, params, 0x1ull);

    ModelDesc other = small_desc();
    other.head_channels = 4;  // same names, different shapes
    Model<float> smaller(other, 7);
    ParamRefs<float> other_params = smaller.named_parameters();
    CHECK_THROWS_AS(load_checkpoint(path, other_params, 0x1ull), ValidationError);

    ModelDesc base_only = small_desc();
    base_only.attention = AttentionKind::None;  // fewer parameters
    Model<float> stripped(base_only, 7);
    ParamRefs<float> stripped_params = stripped.named_parameters();
    CHECK_THROWS_AS(load_checkpoint(path, stripped_params, 0x1ull), ValidationError);
}

TEST_CASE("model construction is deterministic per seed across variants") {
    for (auto attention : {AttentionKind::None, AttentionKind::Drm, AttentionKind::Se,
                           AttentionKind::Eca, AttentionKind::Cbam}) {
        ModelDesc d = small_desc();
        d.attention = attention;
        Model<float> a(d, 11);
        Model<float> b(d, 11);
        auto pa = a.named_parameters();
        auto pb = b.named_parameters();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) {
            CHECK(pa[i].name == pb[i].name);
            CHECK(pa[i].tensor.value() == pb[i].tensor.value());
        }
    }
}

TEST_CASE("per-level drm variant builds and preserves head shapes") {
    ModelDesc d = small_desc();
    d.drm_per_level = true;
    Model<float> model(d, 5);
    std::vector<float> img(1 * 3 * 64 * 64, 0.5f);
    auto out = model.forward(Tensor<float>::from_vector({1, 3, 64, 64}, std::move(img)));
    CHECK(out.maps[0].shape() == Shape4{1, 7, 16, 16});
    CHECK(out.maps[1].shape() == Shape4{1, 7, 8, 8});
    CHECK(out.maps[2].shape() == Shape4{1, 7, 4, 4});
}
