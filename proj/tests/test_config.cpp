// Configuration tests: parsing, precedence, validation, and round-tripping.

#include <doctest.h>

#include <string>

#include "sesm/config.hpp"
#include "sesm/errors.hpp"

using namespace sesm;

TEST_CASE("key=value text parses with comments and later-wins precedence") {
    auto kv = parse_config_text("# a comment\n"
                                "model.heads = 6\n"
                                "\n"
                                "train.lr=0.01   # trailing comment\n"
                                "model.heads = 8\n",
                                "inline");
    CHECK(kv.at("model.heads") == "8");
    CHECK(kv.at("train.lr") == "0.01");

    CHECK_THROWS_AS((void)parse_config_text("not-a-kv-line\n", "inline"), UsageError);
}

TEST_CASE("apply sets every section and rejects unknown keys or bad values") {
    FullConfig cfg;
    cfg.apply({{"model.heads", "5"},
               {"model.dim", "16"},
               {"model.encoder", "cnn"},
               {"model.kernel", "8"},
               {"model.stride", "4"},
               {"loss.lambda_div", "0.25"},
               {"train.epochs", "12"},
               {"train.class_weights", "true"},
               {"train.seed", "99"}});
    CHECK(cfg.model.num_heads == 5);
    CHECK(cfg.model.model_dim == 16);
    CHECK(cfg.model.encoder == EncoderKind::Cnn);
    CHECK(cfg.model.segment_kernel == 8);
    CHECK(cfg.model.segment_stride == 4);
    CHECK(cfg.loss.lambda_div == 0.25);
    CHECK(cfg.train.epochs == 12);
    CHECK(cfg.train.class_weights);
    CHECK(cfg.train.seed == 99);

    CHECK_THROWS_AS(cfg.apply({{"model.nonsense", "1"}}), UsageError);
    CHECK_THROWS_AS(cfg.apply({{"train.lr", "fast"}}), UsageError);
    CHECK_THROWS_AS(cfg.apply({{"model.encoder", "transformer"}}), UsageError);

    // every violation is reported, not just the first
    try {
        cfg.apply({{"model.bogus", "1"}, {"train.junk", "2"}});
        CHECK(false);
    } catch (const UsageError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("model.bogus") != std::string::npos);
        CHECK(msg.find("train.junk") != std::string::npos);
    }
}

TEST_CASE("validation collects cross-field violations") {
    FullConfig cfg;
    cfg.model.num_heads = 0;
    cfg.model.segment_stride = 20; // > kernel 10: windows would skip samples
    cfg.train.batch_size = 1;      // stability loss needs pairs
    cfg.loss.lambda_stab = 0.1;
    try {
        cfg.validate();
        CHECK(false);
    } catch (const UsageError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("heads") != std::string::npos);
        CHECK(msg.find("stride") != std::string::npos);
        CHECK(msg.find("batch") != std::string::npos);
    }

    FullConfig pair_cfg;
    pair_cfg.model.pair_mode = true; // pair inputs are token sequences
    CHECK_THROWS_AS(pair_cfg.validate(), UsageError);

    FullConfig token_cfg;
    token_cfg.model.token_input = true; // vocab required
    CHECK_THROWS_AS(token_cfg.validate(), UsageError);

    FullConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("to_text round-trips the full configuration") {
    FullConfig cfg;
    cfg.model.num_heads = 7;
    cfg.model.encoder = EncoderKind::Cnn;
    cfg.model.token_input = true;
    cfg.model.vocab_size = 123;
    cfg.loss.lambda_loc = 0.037;
    cfg.train.lr = 3.25e-4;
    cfg.train.seed = 4711;
    cfg.train.class_weights = true;

    FullConfig back;
    back.apply(parse_config_text(cfg.to_text(), "roundtrip"));
    CHECK(back.model.num_heads == 7);
    CHECK(back.model.encoder == EncoderKind::Cnn);
    CHECK(back.model.token_input);
    CHECK(back.model.vocab_size == 123);
    CHECK(back.loss.lambda_loc == 0.037);
    CHECK(back.train.lr == 3.25e-4);
    CHECK(back.train.seed == 4711);
    CHECK(back.train.class_weights);
}
