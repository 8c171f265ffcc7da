#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "dmae/checkpoint.hpp"
#include "dmae/config.hpp"

using namespace dmae;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.attributes = 2;
  c.length = 8;
  c.hidden = 4;
  c.groups = 2;
  c.kernel_sizes = {2, 3, 3};
  return c;
}

std::optional<ErrorCode> read_code(const std::string& bytes) {
  std::istringstream in(bytes);
  try {
    read_checkpoint(in);
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

std::string serialise(const Checkpoint& c) {
  std::ostringstream out;
  write_checkpoint(out, c);
  return out.str();
}

}  // namespace

TEST_CASE("checkpoint file round trip") {
  DmaeModel<float> model(small(), 5);
  const data::NormalizerState norm{{1.0, 2.0}, {0.5, 3.0}};
  const auto path = std::filesystem::temp_directory_path() / "dmae_unit_model.dmck";
  save_checkpoint(path, capture(model, norm, true));
  const auto loaded = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(loaded.header.model == small());
  CHECK(loaded.header.warmup_active);
  CHECK(loaded.header.head == HeadKind::kNone);
  auto rebuilt = build_model(loaded);
  auto a = model.parameters(), b = rebuilt->parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(std::memcmp(a[i]->value.data(), b[i]->value.data(), a[i]->value.size() * sizeof(float)) == 0);
  }
  CHECK(serialise(capture(*rebuilt, norm, true)) == serialise(capture(model, norm, true)));
}

TEST_CASE("static-kernel models record one candidate") {
  auto c = small();
  apply_ablation(c, "dk");
  DmaeModel<float> model(c, 1);
  const auto ckpt = capture(model, {{0.0, 0.0}, {1.0, 1.0}}, false);
  CHECK(ckpt.header.model.effective_groups() == 1);
  CHECK(ckpt.header.model.groups == 1);
  CHECK_FALSE(ckpt.header.model.use_dk);
}

TEST_CASE("damaged checkpoints map to distinct codes") {
  DmaeModel<float> model(small(), 2);
  const auto bytes = serialise(capture(model, {{0.0, 0.0}, {1.0, 1.0}}, false));
  auto magic = bytes;
  magic[1] = 'Z';
  CHECK(read_code(magic) == ErrorCode::kBadMagic);
  auto version = bytes;
  version[4] = static_cast<char>(kCheckpointVersion + 7);
  CHECK(read_code(version) == ErrorCode::kVersionMismatch);
  CHECK(read_code(bytes.substr(0, bytes.size() - 5)) == ErrorCode::kTruncated);
  CHECK(read_code(bytes + "x") == ErrorCode::kInconsistent);
  CHECK(read_code("") == ErrorCode::kBadMagic);
  CHECK_FALSE(read_code(bytes).has_value());

  DmaeModel<float> wider([] {
    auto c = small();
    c.hidden = 5;
    return c;
  }(), 2);
  std::istringstream in(bytes);
  const auto ckpt = read_checkpoint(in);
  try {
    restore(ckpt, wider);
    FAIL("expected an inconsistency");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInconsistent);
  }
  try {
    check_compatible(ckpt.header, 2, 9);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
  }
}

TEST_CASE("training configuration json") {
  TrainConfig base;
  base.model.hidden = 32;
  base.epochs = 4;
  const auto j = to_json(base);
  CHECK(j.at("epochs") == 4);
  CHECK(j.at("model").at("hidden") == 32);
  const auto back = train_config_from_json(j);
  CHECK(back.epochs == 4);
  CHECK(back.model == base.model);

  const auto partial = train_config_from_json(Json::parse(R"({"learning_rate": 0.01, "model": {"mask_ratio": 0.3}})"));
  CHECK(partial.learning_rate == 0.01);
  CHECK(partial.model.mask_ratio == 0.3);
  CHECK(partial.epochs == TrainConfig{}.epochs);

  for (const char* bad : {R"({"epoch": 3})", R"({"epochs": "three"})", R"({"model": {"hiden": 3}})"}) {
    try {
      train_config_from_json(Json::parse(bad));
      FAIL("accepted " << bad);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kConfig);
    }
  }
}

TEST_CASE("ablation switches and head names") {
  ModelConfig c;
  for (const char* part : {"dpe", "rm", "dk", "asf"}) apply_ablation(c, part);
  CHECK_FALSE(c.use_dpe);
  CHECK_FALSE(c.use_rm);
  CHECK_FALSE(c.use_dk);
  CHECK_FALSE(c.use_asf);
  CHECK_THROWS_AS(apply_ablation(c, "bn"), Error);
  CHECK(parse_head_kind("classify") == HeadKind::kClassify);
  CHECK(head_kind_name(HeadKind::kPredict) == "predict");
  CHECK_THROWS_AS(parse_head_kind("regress"), Error);
}

TEST_CASE("metric csv layout") {
  std::vector<EpochRecord> h(2);
  h[1].epoch = 1;
  h[1].train_loss = 0.125;
  std::ostringstream out;
  write_pretrain_metrics(out, h);
  const auto text = out.str();
  CHECK(text.rfind("epoch,train_loss,val_mse_v,val_mse_m,val_loss\n", 0) == 0);
  CHECK(text.find("\n1,0.125,") != std::string::npos);
  CHECK(format_float(1.0 / 3.0) == "0.333333333");
}
