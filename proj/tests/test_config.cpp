#include <catch2/catch_amalgamated.hpp>

#include "msmem/config.hpp"

using namespace msmem;
using nlohmann::json;

namespace {

json minimal() {
    return json::parse(R"({"output_dir": "out", "seed": 3,
                           "data": {"source": "synthetic", "train_k": 3, "test_k": 1,
                                    "synthetic": {"classes": 4, "per_class": 4, "size": 32}}})");
}

std::string failing_field(const json& j) {
    try {
        parse_run_config(j);
    } catch (const ConfigError& e) {
        return e.field;
    }
    return "";
}

}  // namespace

TEST_CASE("config defaults and propagation", "[config]") {
    auto c = parse_run_config(minimal());
    CHECK(c.model.purifier.image_size == 32);
    CHECK(c.classifier.model.num_classes == 4);
    CHECK(c.classifier.model.image_size == 32);
    CHECK(c.train.seed == 3);
    CHECK(c.data.synthetic.seed == 3);
    CHECK(c.model.purifier.addressing == Addressing::learned);
    CHECK(c.attacks.empty());
}

TEST_CASE("config round trip and hash", "[config]") {
    auto j = minimal();
    j["attacks"] = json::parse(R"([{"family": "pgd", "epsilon": 0.03, "steps": 5, "step_size": 0.01}])");
    auto c = parse_run_config(j);
    auto again = parse_run_config(to_json(c));
    CHECK(to_json(again) == to_json(c));
    CHECK(config_hash(again) == config_hash(c));

    auto moved = c;
    moved.output_dir = "elsewhere";
    CHECK(config_hash(moved) == config_hash(c));
    auto reseeded = c;
    reseeded.train.seed = 4;
    CHECK(config_hash(reseeded) != config_hash(c));

    CHECK(fnv1a_hex("") == "cbf29ce484222325");
    CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("config errors name the field", "[config]") {
    auto j = minimal();
    j.erase("output_dir");
    CHECK(failing_field(j) == "output_dir");

    j = minimal();
    j["model"] = {{"memory_itemz", 10}};
    CHECK(failing_field(j) == "model.memory_itemz");

    j = minimal();
    j["train"] = {{"batch_size", "big"}};
    CHECK(failing_field(j) == "train.batch_size");

    j = minimal();
    j["model"] = {{"addressing", "euclid"}};
    CHECK(failing_field(j) == "model.addressing");

    j = minimal();
    j["attacks"] = json::parse(R"([{"family": "fgsm", "epsilon": -0.1}])");
    CHECK(failing_field(j) == "attacks[0].epsilon");

    j = minimal();
    j["data"]["train_k"] = 4;
    CHECK(failing_field(j) == "data.train_k");

    j = minimal();
    j["data"]["synthetic"]["size"] = 30;
    CHECK(failing_field(j) == "data.synthetic.size");

    CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}
