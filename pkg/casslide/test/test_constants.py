from .. import constants


def test_labels_follow_masks():
    assert (constants.BACKGROUND, constants.BENIGN, constants.DCIS, constants.IDC) == (0, 1, 2, 3)
    assert len(constants.CLASS_NAMES) == len(constants.CLASS_COLORS) == constants.NUM_CLASSES


def test_windows_are_multiples_of_the_downsampling():
    assert all(window % constants.DOWNSAMPLING == 0 for window in constants.WINDOW_SIZES)
    assert constants.DEFAULT_STRIDE % constants.DOWNSAMPLING == 0
